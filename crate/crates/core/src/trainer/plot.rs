//! Self-contained SVG of one window: observed paths (solid), ground truth
//! (dashed) and sampled forecasts drawn translucent, so regions many samples
//! pass through read darker.

use std::fmt::Write as _;

use super::eval::WindowForecast;
use crate::sstg::{Point, TrajectoryWindow};

const SIZE: f64 = 640.0;
const MARGIN: f64 = 24.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

/// Agents are matched by id between the window and the forecast; agents
/// without a forecast still get their observed and ground-truth paths.
pub fn render(window: &TrajectoryWindow, forecast: Option<&WindowForecast>) -> String {
    let observed: Vec<Vec<Point>> = window
        .tracks
        .iter()
        .map(|t| t.observed.iter().flatten().copied().collect())
        .collect();
    let truth: Vec<Vec<Point>> = window
        .tracks
        .iter()
        .map(|t| {
            // Continue from the last observed point so the two styles join.
            t.last_observed()
                .into_iter()
                .chain(t.future.iter().flatten().copied())
                .collect()
        })
        .collect();
    let mut all: Vec<Point> = observed.iter().chain(&truth).flatten().copied().collect();
    if let Some(f) = forecast {
        all.extend(f.samples.iter().flatten().flatten().copied());
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &all {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    if all.is_empty() {
        (lo, hi) = ([0.0; 2], [1.0; 2]);
    }
    // Uniform scale keeps angles and distances honest.
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let map = |p: &Point| {
        (
            MARGIN + (p[0] - lo[0]) * scale,
            SIZE - MARGIN - (p[1] - lo[1]) * scale,
        )
    };
    let points = |path: &[Point]| {
        let mut s = String::new();
        for (i, p) in path.iter().enumerate() {
            let (x, y) = map(p);
            let _ = write!(s, "{}{x:.2},{y:.2}", if i == 0 { "" } else { " " });
        }
        s
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (a, tr) in window.tracks.iter().enumerate() {
        let color = PALETTE[a % PALETTE.len()];
        if let Some(f) = forecast {
            if let Some(k) = f.ids.iter().position(|&id| id == tr.id) {
                let n = f.samples[k].len().max(1);
                let opacity = (4.0 / n as f64).min(0.8);
                for s in &f.samples[k] {
                    let _ = writeln!(
                        svg,
                        r#"<polyline class="sample" data-agent="{}" points="{}" fill="none" stroke="{color}" stroke-width="1" stroke-opacity="{opacity:.3}"/>"#,
                        tr.id,
                        points(s)
                    );
                }
            }
        }
        let _ = writeln!(
            svg,
            r#"<polyline class="observed" data-agent="{}" points="{}" fill="none" stroke="{color}" stroke-width="2.5"/>"#,
            tr.id,
            points(&observed[a])
        );
        if truth[a].len() >= 2 {
            let _ = writeln!(
                svg,
                r#"<polyline class="truth" data-agent="{}" points="{}" fill="none" stroke="{color}" stroke-width="2" stroke-dasharray="6 4"/>"#,
                tr.id,
                points(&truth[a])
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
