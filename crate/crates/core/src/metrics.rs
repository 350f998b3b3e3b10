//! Displacement, collision, horizon and class-weighted error metrics.
//!
//! Trajectories are per-agent position sequences over the predicted frames.
//! Ground truth is optional per step; steps without ground truth are skipped.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sstg::{AgentClass, Point};

pub const COLLISION_THRESHOLD: f64 = 0.2;
pub const WEIGHT_VEHICLE: f64 = 0.20;
pub const WEIGHT_PEDESTRIAN: f64 = 0.58;
pub const WEIGHT_BICYCLIST: f64 = 0.22;

pub fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn check_aligned(pred: &[Vec<Point>], gt: &[Vec<Option<Point>>]) -> Result<()> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::shape(
            "metrics",
            "prediction and ground truth are not aligned",
        ));
    }
    Ok(())
}

/// Mean Euclidean error over every valid (agent, step) pair.
pub fn ade(pred: &[Vec<Point>], gt: &[Vec<Option<Point>>]) -> Result<f64> {
    check_aligned(pred, gt)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in p.iter().zip(g) {
            if let Some(b) = b {
                sum += dist(*a, *b);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::invalid("ade over an empty valid set"));
    }
    Ok(sum / n as f64)
}

/// Mean final-step error over agents whose final step is valid.
pub fn fde(pred: &[Vec<Point>], gt: &[Vec<Option<Point>>]) -> Result<f64> {
    check_aligned(pred, gt)?;
    let errs: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter_map(|(p, g)| Some(dist(*p.last()?, (*g.last()?)?)))
        .collect();
    if errs.is_empty() {
        return Err(Error::invalid("fde: no agent has a valid final frame"));
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// How best-of-N picks the reported FDE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pairing {
    /// FDE of the sample that minimises ADE.
    #[default]
    Joint,
    /// Minimum FDE over samples, chosen separately.
    Independent,
}

/// Best-of-N errors of one agent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentError {
    pub ade: f64,
    /// `None` when the final ground-truth step is missing.
    pub fde: Option<f64>,
}

/// Index and ADE of the sample closest to `gt`; the first wins ties. `None`
/// when `gt` has no valid step.
pub fn select_best(samples: &[Vec<Point>], gt: &[Option<Point>]) -> Result<Option<(usize, f64)>> {
    if !gt.iter().any(Option::is_some) {
        return Ok(None);
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, traj) in samples.iter().enumerate() {
        let a = ade(std::slice::from_ref(traj), &[gt.to_vec()])?;
        if best.is_none_or(|(_, b)| a < b) {
            best = Some((k, a));
        }
    }
    Ok(best)
}

/// Per-agent best-of-N errors; `samples[agent][sample][step]`. Agents with no
/// valid ground-truth step are skipped.
pub fn best_of_n_agents(
    samples: &[Vec<Vec<Point>>],
    gt: &[Vec<Option<Point>>],
    pairing: Pairing,
) -> Result<Vec<AgentError>> {
    if samples.len() != gt.len() {
        return Err(Error::shape(
            "best_of_n",
            "sample and ground-truth agent counts differ",
        ));
    }
    let mut out = Vec::new();
    for (s, g) in samples.iter().zip(gt) {
        if s.is_empty() {
            return Err(Error::invalid("best_of_n needs at least one sample"));
        }
        if !g.iter().any(Option::is_some) {
            continue;
        }
        let (k, a) = select_best(s, g)?.expect("agent has a valid step");
        let f = match pairing {
            Pairing::Joint => fde(std::slice::from_ref(&s[k]), std::slice::from_ref(g)).ok(),
            Pairing::Independent => s
                .iter()
                .filter_map(|traj| fde(std::slice::from_ref(traj), std::slice::from_ref(g)).ok())
                .reduce(f64::min),
        };
        out.push(AgentError { ade: a, fde: f });
    }
    Ok(out)
}

/// Mean over agents of the best-of-N (ADE, FDE).
pub fn best_of_n(
    samples: &[Vec<Vec<Point>>],
    gt: &[Vec<Option<Point>>],
    pairing: Pairing,
) -> Result<(f64, f64)> {
    summarize(&best_of_n_agents(samples, gt, pairing)?)
}

/// Mean ADE and mean FDE (over agents with a final step) of agent errors.
pub fn summarize(errors: &[AgentError]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::invalid("no agent errors to summarise"));
    }
    let ade = errors.iter().map(|e| e.ade).sum::<f64>() / errors.len() as f64;
    let f: Vec<f64> = errors.iter().filter_map(|e| e.fde).collect();
    if f.is_empty() {
        return Err(Error::invalid("no agent has a valid final frame"));
    }
    Ok((ade, f.iter().sum::<f64>() / f.len() as f64))
}

/// Whether any two agents come strictly closer than `threshold` at any frame.
pub fn collides(trajs: &[Vec<Point>], threshold: f64) -> bool {
    colliding_pairs(trajs, threshold).0 > 0
}

/// (colliding pairs, total pairs) for one window.
pub fn colliding_pairs(trajs: &[Vec<Point>], threshold: f64) -> (usize, usize) {
    let (mut hit, mut total) = (0, 0);
    for i in 0..trajs.len() {
        for j in i + 1..trajs.len() {
            total += 1;
            if trajs[i]
                .iter()
                .zip(&trajs[j])
                .any(|(a, b)| dist(*a, *b) < threshold)
            {
                hit += 1;
            }
        }
    }
    (hit, total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ColUnit {
    /// Percentage of windows with at least one colliding pair.
    #[default]
    Window,
    /// Percentage of agent pairs that collide.
    Pair,
}

/// COL in percent over windows (`windows[w][agent][step]`). Windows with
/// fewer than two agents do not count.
pub fn col(windows: &[Vec<Vec<Point>>], threshold: f64, unit: ColUnit) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for w in windows.iter().filter(|w| w.len() >= 2) {
        match unit {
            ColUnit::Window => {
                total += 1;
                hit += usize::from(collides(w, threshold));
            }
            ColUnit::Pair => {
                let (h, t) = colliding_pairs(w, threshold);
                hit += h;
                total += t;
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid(
            "col needs at least one window with two agents",
        ));
    }
    Ok(100.0 * hit as f64 / total as f64)
}

/// Step index (0-based) of the frame closest to `seconds` after the last
/// observation.
pub fn horizon_step(seconds: f64, fps: f64) -> Result<usize> {
    let k = (seconds * fps).round();
    if !(k >= 1.0) {
        return Err(Error::invalid(format!(
            "horizon {seconds} s at {fps} fps is before the first step"
        )));
    }
    Ok(k as usize - 1)
}

/// Squared-error accumulator for per-horizon RMSE across windows.
#[derive(Clone, Debug)]
pub struct RmseAccumulator {
    pub horizons: Vec<f64>,
    steps: Vec<usize>,
    sq: Vec<f64>,
    n: Vec<usize>,
}

impl RmseAccumulator {
    pub fn new(horizons: &[f64], fps: f64, t_pred: usize) -> Result<Self> {
        let steps = horizons
            .iter()
            .map(|&h| horizon_step(h, fps))
            .collect::<Result<Vec<_>>>()?;
        if let Some((h, s)) = horizons.iter().zip(&steps).find(|(_, &s)| s >= t_pred) {
            return Err(Error::invalid(format!(
                "horizon {h} s (step {}) beyond T_pred = {t_pred}",
                s + 1
            )));
        }
        Ok(Self {
            horizons: horizons.to_vec(),
            sq: vec![0.0; steps.len()],
            n: vec![0; steps.len()],
            steps,
        })
    }

    pub fn add(&mut self, pred: &[Vec<Point>], gt: &[Vec<Option<Point>>]) -> Result<()> {
        check_aligned(pred, gt)?;
        for (i, &s) in self.steps.iter().enumerate() {
            for (p, g) in pred.iter().zip(gt) {
                if let (Some(a), Some(Some(b))) = (p.get(s), g.get(s)) {
                    self.sq[i] += dist(*a, *b).powi(2);
                    self.n[i] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<Vec<f64>> {
        self.sq
            .iter()
            .zip(&self.n)
            .zip(&self.horizons)
            .map(|((s, &n), h)| {
                if n == 0 {
                    Err(Error::invalid(format!(
                        "no valid ground truth at horizon {h} s"
                    )))
                } else {
                    Ok((s / n as f64).sqrt())
                }
            })
            .collect()
    }

    pub fn counts(&self) -> &[usize] {
        &self.n
    }
}

/// RMSE at each horizon (seconds) for a single batch of trajectories.
pub fn rmse_per_horizon(
    pred: &[Vec<Point>],
    gt: &[Vec<Option<Point>>],
    horizons: &[f64],
    fps: f64,
) -> Result<Vec<f64>> {
    let t_pred = pred.iter().map(Vec::len).min().unwrap_or(0);
    let mut acc = RmseAccumulator::new(horizons, fps, t_pred)?;
    acc.add(pred, gt)?;
    acc.finish()
}

/// `0.20·vehicle + 0.58·pedestrian + 0.22·bicyclist`.
pub fn weighted_sums(vehicle: f64, pedestrian: f64, bicyclist: f64) -> f64 {
    WEIGHT_VEHICLE * vehicle + WEIGHT_PEDESTRIAN * pedestrian + WEIGHT_BICYCLIST * bicyclist
}

/// Class-weighted sum of per-class values; every class must be present.
pub fn weighted_by_class(values: &BTreeMap<AgentClass, f64>) -> Result<f64> {
    let get = |c: AgentClass| {
        values
            .get(&c)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing class {c:?}")))
    };
    Ok(weighted_sums(
        get(AgentClass::Vehicle)?,
        get(AgentClass::Pedestrian)?,
        get(AgentClass::Bicyclist)?,
    ))
}

/// Named metric values with counts and the configuration they came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub protocol: String,
    /// (name, value, count)
    pub values: Vec<(String, f64, usize)>,
    pub windows: usize,
    pub samples: usize,
    pub config: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64, count: usize) {
        self.values.push((name.into(), value, count));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _, _)| n == name).map(|v| v.1)
    }

    /// Aligned human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "protocol {}  windows {}  samples {}",
            self.protocol, self.windows, self.samples
        );
        let width = self.values.iter().map(|v| v.0.len()).max().unwrap_or(0);
        for (name, value, count) in &self.values {
            let _ = writeln!(s, "  {name:<width$}  {value:>10.4}  (n = {count})");
        }
        for (k, v) in &self.config {
            let _ = writeln!(s, "  # {k} = {v}");
        }
        s
    }

    /// One `name value count` line per metric.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (name, value, count) in &self.values {
            let _ = writeln!(s, "{name} {value} {count}");
        }
        s
    }
}
