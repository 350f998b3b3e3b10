//! Forecast collection and protocol-specific reports.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use super::config::{EvalConfig, Protocol};
use crate::error::{Error, Result};
use crate::metrics::{self, AgentError, MetricsReport, RmseAccumulator};
use crate::pipeline::{derive_seed, Model};
use crate::sstg::{AgentClass, AgentId, Point, TrajectoryWindow};

/// Forecasts for the agents of one window that are present at its last
/// observed frame. All per-agent vectors share the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowForecast {
    pub ids: Vec<AgentId>,
    pub classes: Vec<Option<AgentClass>>,
    /// `[agent][sample][step]`
    pub samples: Vec<Vec<Vec<Point>>>,
    /// `[agent][step]`
    pub mean: Vec<Vec<Point>>,
    pub gt: Vec<Vec<Option<Point>>>,
}

impl WindowForecast {
    pub fn agent_count(&self) -> usize {
        self.ids.len()
    }
}

/// Model forecasts; window `i` samples with `derive_seed(seed, i)`, so the
/// result does not depend on thread scheduling.
pub fn forecast(
    model: &Model,
    windows: &[TrajectoryWindow],
    samples: usize,
    seed: u64,
) -> Result<Vec<WindowForecast>> {
    windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let p = model.predict_multimodal(w, samples, derive_seed(seed, i as u64))?;
            let tracks: Vec<_> = p.agents.iter().map(|a| &w.tracks[a.track]).collect();
            Ok(WindowForecast {
                ids: tracks.iter().map(|t| t.id).collect(),
                classes: tracks.iter().map(|t| t.class).collect(),
                mean: p.agents.iter().map(|a| a.mean_path()).collect(),
                samples: p.samples,
                gt: tracks.iter().map(|t| t.future.clone()).collect(),
            })
        })
        .collect()
}

/// Constant-velocity extrapolation from the last two observed positions
/// (gaps divided by the elapsed frames); a single deterministic sample.
pub fn constant_velocity(window: &TrajectoryWindow) -> WindowForecast {
    let mut out = WindowForecast {
        ids: Vec::new(),
        classes: Vec::new(),
        samples: Vec::new(),
        mean: Vec::new(),
        gt: Vec::new(),
    };
    for tr in &window.tracks {
        let present: Vec<(usize, Point)> = tr
            .observed
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|p| (i, p)))
            .collect();
        let Some(&(li, last)) = present.last() else {
            continue;
        };
        if li + 1 != tr.observed.len() {
            continue;
        }
        let v = match present.len() {
            n if n >= 2 => {
                let (pi, prev) = present[n - 2];
                let dt = (li - pi) as f64;
                [(last[0] - prev[0]) / dt, (last[1] - prev[1]) / dt]
            }
            _ => [0.0, 0.0],
        };
        let path: Vec<Point> = (1..=window.t_pred)
            .map(|k| [last[0] + v[0] * k as f64, last[1] + v[1] * k as f64])
            .collect();
        out.ids.push(tr.id);
        out.classes.push(tr.class);
        out.samples.push(vec![path.clone()]);
        out.mean.push(path);
        out.gt.push(tr.future.clone());
    }
    out
}

/// Mean-trajectory ADE and FDE over all windows, pooling agents.
pub fn mean_errors(forecasts: &[WindowForecast]) -> Result<(f64, f64)> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for f in forecasts {
        pred.extend(f.mean.iter().cloned());
        gt.extend(f.gt.iter().cloned());
    }
    Ok((metrics::ade(&pred, &gt)?, metrics::fde(&pred, &gt)?))
}

/// Best-of-N errors of every agent with ground truth, with its class.
pub fn agent_errors(
    forecasts: &[WindowForecast],
    eval: &EvalConfig,
) -> Result<Vec<(Option<AgentClass>, AgentError)>> {
    let mut out = Vec::new();
    for f in forecasts {
        let with_gt: Vec<usize> = (0..f.agent_count())
            .filter(|&a| f.gt[a].iter().any(Option::is_some))
            .collect();
        let samples: Vec<_> = with_gt.iter().map(|&a| f.samples[a].clone()).collect();
        let gt: Vec<_> = with_gt.iter().map(|&a| f.gt[a].clone()).collect();
        let errs = metrics::best_of_n_agents(&samples, &gt, eval.pairing)?;
        out.extend(with_gt.iter().map(|&a| f.classes[a]).zip(errs));
    }
    Ok(out)
}

/// The report for `eval.protocol`. Every protocol reports best-of-N ADE/FDE,
/// mean-trajectory ADE/FDE and COL (on mean trajectories); vehicle adds
/// per-second RMSE of the ADE-selected sample, apollo per-class and weighted
/// sums.
pub fn report(forecasts: &[WindowForecast], eval: &EvalConfig) -> Result<MetricsReport> {
    let mut r = MetricsReport {
        protocol: eval.protocol.to_string(),
        windows: forecasts.len(),
        samples: forecasts
            .iter()
            .flat_map(|f| f.samples.first())
            .map(Vec::len)
            .next()
            .unwrap_or(0),
        ..Default::default()
    };
    let errs = agent_errors(forecasts, eval)?;
    let plain: Vec<AgentError> = errs.iter().map(|e| e.1).collect();
    let (ade, fde) = metrics::summarize(&plain)?;
    let n_fde = plain.iter().filter(|e| e.fde.is_some()).count();
    r.push("ade", ade, plain.len());
    r.push("fde", fde, n_fde);
    let (made, mfde) = mean_errors(forecasts)?;
    r.push("ade_mean", made, plain.len());
    r.push("fde_mean", mfde, n_fde);

    let multi: Vec<Vec<Vec<Point>>> = forecasts
        .iter()
        .filter(|f| f.agent_count() >= 2)
        .map(|f| f.mean.clone())
        .collect();
    if !multi.is_empty() {
        r.push(
            "col",
            metrics::col(&multi, eval.col_threshold, eval.col_unit)?,
            multi.len(),
        );
    }

    match eval.protocol {
        Protocol::Pedestrian => {}
        Protocol::Vehicle => {
            let t_pred = forecasts
                .iter()
                .flat_map(|f| f.gt.first())
                .map(Vec::len)
                .min()
                .unwrap_or(0);
            let horizons: Vec<f64> = (1..=5).map(f64::from).collect();
            let mut acc = RmseAccumulator::new(&horizons, eval.fps, t_pred)?;
            for f in forecasts {
                let mut pred = Vec::new();
                let mut gt = Vec::new();
                for a in 0..f.agent_count() {
                    if let Some((k, _)) = metrics::select_best(&f.samples[a], &f.gt[a])? {
                        pred.push(f.samples[a][k].clone());
                        gt.push(f.gt[a].clone());
                    }
                }
                acc.add(&pred, &gt)?;
            }
            for ((h, v), n) in horizons.iter().zip(acc.finish()?).zip(acc.counts()) {
                r.push(format!("rmse_{h}s"), v, *n);
            }
        }
        Protocol::Apollo => {
            let mut by_class: BTreeMap<AgentClass, Vec<AgentError>> = BTreeMap::new();
            for (c, e) in &errs {
                if let Some(c) = c {
                    by_class.entry(*c).or_default().push(*e);
                }
            }
            let mut ades = BTreeMap::new();
            let mut fdes = BTreeMap::new();
            for (c, es) in &by_class {
                let (a, f) = metrics::summarize(es)?;
                let name = format!("{c:?}").to_lowercase();
                r.push(format!("ade_{name}"), a, es.len());
                r.push(
                    format!("fde_{name}"),
                    f,
                    es.iter().filter(|e| e.fde.is_some()).count(),
                );
                ades.insert(*c, a);
                fdes.insert(*c, f);
            }
            match (
                metrics::weighted_by_class(&ades),
                metrics::weighted_by_class(&fdes),
            ) {
                (Ok(wa), Ok(wf)) => {
                    r.push("wsade", wa, plain.len());
                    r.push("wsfde", wf, n_fde);
                }
                (Err(e), _) | (_, Err(e)) => log::warn!("weighted sums not reported: {e}"),
            }
        }
    }
    r.config.push((
        "pairing".into(),
        format!("{:?}", eval.pairing).to_lowercase(),
    ));
    r.config
        .push(("col_threshold".into(), eval.col_threshold.to_string()));
    r.config.push((
        "col_unit".into(),
        format!("{:?}", eval.col_unit).to_lowercase(),
    ));
    r.config.push(("fps".into(), eval.fps.to_string()));
    Ok(r)
}

/// Forecasts and reports in one go.
pub fn evaluate(
    model: &Model,
    windows: &[TrajectoryWindow],
    eval: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::invalid("no evaluation windows"));
    }
    report(&forecast(model, windows, eval.samples, seed)?, eval)
}

pub fn evaluate_constant_velocity(
    windows: &[TrajectoryWindow],
    eval: &EvalConfig,
) -> Result<MetricsReport> {
    let f: Vec<WindowForecast> = windows.iter().map(constant_velocity).collect();
    let mut r = report(&f, eval)?;
    r.protocol = format!("{} (constant velocity)", r.protocol);
    Ok(r)
}

/// `frame agent sample x y` lines for the future frames of one window.
pub fn write_predictions(
    mut w: impl Write,
    window: &TrajectoryWindow,
    f: &WindowForecast,
) -> Result<()> {
    let stride = window.stride();
    let last = *window.frames.last().expect("windows have frames");
    for (a, id) in f.ids.iter().enumerate() {
        for (k, path) in f.samples[a].iter().enumerate() {
            for (j, p) in path.iter().enumerate() {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}",
                    last + (j as i64 + 1) * stride,
                    id,
                    k,
                    p[0],
                    p[1]
                )?;
            }
        }
    }
    Ok(())
}
