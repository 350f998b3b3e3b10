//! Social interaction spatio-temporal graph and its pseudo-image packing.
//!
//! Each observed frame becomes a graph whose vertices are agent positions and
//! whose edge weights are the inverse L2 distance between agents. Node features
//! are per-unit-time displacements ("velocities"). The per-frame graphs are
//! then packed into fixed-resolution `T×K` pseudo-images: agents fill the `K`
//! slots in ascending id order, and when there are more than `K` agents the
//! diagonal stack of adjacency matrices is cut into `K×K` blocks.

use std::fmt::Write as _;

use crate::diffarray::Array;
use crate::error::{Error, Result};

pub type AgentId = u64;
pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
    Bicyclist,
}

/// One agent's observed and future positions inside a window.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrack {
    pub id: AgentId,
    pub class: Option<AgentClass>,
    /// One entry per observed frame; `None` where the agent is absent.
    pub observed: Vec<Option<Point>>,
    /// One entry per future frame; empty when no ground truth is attached.
    pub future: Vec<Option<Point>>,
}

impl AgentTrack {
    pub fn present_count(&self) -> usize {
        self.observed.iter().filter(|p| p.is_some()).count()
    }

    /// Position at the final observed frame, if present.
    pub fn last_observed(&self) -> Option<Point> {
        self.observed.last().copied().flatten()
    }
}

/// A fixed-length sequence of frames with the agents visible in it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryWindow {
    /// Observed frame ids, uniformly spaced.
    pub frames: Vec<i64>,
    /// Number of future frames (0 when no ground truth is attached).
    pub t_pred: usize,
    /// Tracks sorted by ascending agent id.
    pub tracks: Vec<AgentTrack>,
}

impl TrajectoryWindow {
    /// Validates and normalises a window: tracks are sorted by id, every
    /// track has one entry per observed frame and `t_pred` future entries (or
    /// none), and every agent is present in at least two observed frames.
    pub fn new(frames: Vec<i64>, t_pred: usize, mut tracks: Vec<AgentTrack>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("window needs at least one observed frame"));
        }
        if frames.len() > 1 {
            let stride = frames[1] - frames[0];
            if stride <= 0 || frames.windows(2).any(|w| w[1] - w[0] != stride) {
                return Err(Error::invalid(
                    "observed frames must have a uniform positive stride",
                ));
            }
        }
        tracks.sort_by_key(|t| t.id);
        if tracks.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::invalid("duplicate agent id in window"));
        }
        for tr in &tracks {
            if tr.observed.len() != frames.len() {
                return Err(Error::invalid(format!(
                    "agent {} has {} observed entries for {} frames",
                    tr.id,
                    tr.observed.len(),
                    frames.len()
                )));
            }
            if !tr.future.is_empty() && tr.future.len() != t_pred {
                return Err(Error::invalid(format!(
                    "agent {} has {} future entries, expected {t_pred}",
                    tr.id,
                    tr.future.len()
                )));
            }
            if tr.present_count() < 2 {
                return Err(Error::invalid(format!(
                    "agent {} is present in fewer than 2 observed frames",
                    tr.id
                )));
            }
            let finite = |p: &Option<Point>| p.is_none_or(|q| q[0].is_finite() && q[1].is_finite());
            if !tr.observed.iter().chain(&tr.future).all(finite) {
                return Err(Error::invalid(format!(
                    "agent {} has non-finite coordinates",
                    tr.id
                )));
            }
        }
        Ok(Self {
            frames,
            t_pred,
            tracks,
        })
    }

    pub fn t_obs(&self) -> usize {
        self.frames.len()
    }

    pub fn agent_count(&self) -> usize {
        self.tracks.len()
    }

    pub fn has_future(&self) -> bool {
        self.t_pred > 0 && self.tracks.iter().all(|t| t.future.len() == self.t_pred)
    }

    /// Frame stride (1 for single-frame windows).
    pub fn stride(&self) -> i64 {
        if self.frames.len() > 1 {
            self.frames[1] - self.frames[0]
        } else {
            1
        }
    }

    /// Maximum number of agents present in any single observed frame.
    pub fn max_simultaneous(&self) -> usize {
        (0..self.t_obs())
            .map(|t| {
                self.tracks
                    .iter()
                    .filter(|tr| tr.observed[t].is_some())
                    .count()
            })
            .max()
            .unwrap_or(0)
    }
}

/// Social interaction weight for an inter-agent distance: 1 at zero distance,
/// the inverse distance otherwise.
pub fn kernel_fa(distance: f64) -> Result<f64> {
    if !(distance >= 0.0) {
        return Err(Error::domain(
            "kernel_fa",
            format!("distance {distance} is negative"),
        ));
    }
    Ok(if distance <= 1e-12 {
        1.0
    } else {
        1.0 / distance
    })
}

/// Per-frame velocity of one track: `(0, 0)` at the first present frame,
/// then the displacement since the previous present frame divided by the
/// number of frames elapsed. Absent frames are `None`.
pub fn track_velocities(observed: &[Option<Point>]) -> Result<Vec<Option<Point>>> {
    if observed.iter().filter(|p| p.is_some()).count() < 2 {
        return Err(Error::invalid(
            "agent needs at least 2 present frames for a velocity",
        ));
    }
    let mut out = vec![None; observed.len()];
    let mut prev: Option<(usize, Point)> = None;
    for (t, p) in observed.iter().enumerate() {
        let Some(p) = *p else { continue };
        out[t] = Some(match prev {
            None => [0.0, 0.0],
            Some((tp, q)) => {
                let dt = (t - tp) as f64;
                [(p[0] - q[0]) / dt, (p[1] - q[1]) / dt]
            }
        });
        prev = Some((t, p));
    }
    Ok(out)
}

/// Velocities for every track of a window, indexed `[agent][frame]`.
pub fn velocity_nodes(window: &TrajectoryWindow) -> Result<Vec<Vec<Option<Point>>>> {
    window
        .tracks
        .iter()
        .map(|tr| {
            track_velocities(&tr.observed).map_err(|_| {
                Error::invalid(format!("agent {}: fewer than 2 present frames", tr.id))
            })
        })
        .collect()
}

/// Raw adjacency `A_t` for one frame. Rows and columns of absent agents are 0.
pub fn adjacency(positions: &[Option<Point>]) -> Result<Array> {
    let n = positions.len();
    if positions.iter().all(|p| p.is_none()) {
        return Err(Error::invalid("adjacency needs at least one present agent"));
    }
    let mut a = Array::zeros(&[n, n]);
    for i in 0..n {
        let Some(pi) = positions[i] else { continue };
        for j in i..n {
            let Some(pj) = positions[j] else { continue };
            let d = ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)).sqrt();
            let w = if i == j { 1.0 } else { kernel_fa(d)? };
            a.set(&[i, j], w);
            a.set(&[j, i], w);
        }
    }
    Ok(a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `Λ^{-1/2} A Λ^{-1/2}`.
    #[default]
    Symmetric,
    /// `Λ^{1/2} A Λ^{-1/2}`, kept for comparison with the printed form.
    Literal,
}

/// Degree normalisation of an adjacency matrix over its present agents.
/// Rows with zero degree (absent agents) stay zero.
pub fn normalize(a: &Array, present: &[bool], kind: Normalization) -> Result<Array> {
    let n = present.len();
    if a.shape() != [n, n] {
        return Err(Error::shape(
            "normalize",
            format!("{:?} for {n} agents", a.shape()),
        ));
    }
    let mut deg = vec![0.0; n];
    for i in 0..n {
        if !present[i] {
            continue;
        }
        // Summing in sorted order makes the degree independent of agent order,
        // so relabelling permutes the output exactly.
        let mut row: Vec<f64> = (0..n)
            .filter(|&j| present[j])
            .map(|j| a.get(&[i, j]))
            .collect();
        row.sort_by(f64::total_cmp);
        deg[i] = row.iter().sum();
        if !(deg[i] > 0.0) {
            return Err(Error::domain(
                "normalize",
                format!("present agent {i} has zero degree"),
            ));
        }
    }
    let mut out = Array::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if !(present[i] && present[j]) {
                continue;
            }
            // One square root per entry keeps uniform-degree cases exact.
            let w = match kind {
                Normalization::Symmetric => a.get(&[i, j]) / (deg[i] * deg[j]).sqrt(),
                Normalization::Literal => a.get(&[i, j]) * (deg[i] / deg[j]).sqrt(),
            };
            out.set(&[i, j], w);
        }
    }
    Ok(out)
}

/// Per-frame graphs for a window.
#[derive(Clone, Debug)]
pub struct SpatioTemporalGraph {
    pub agents: Vec<AgentId>,
    /// `[frame][agent]` positions.
    pub positions: Vec<Vec<Option<Point>>>,
    /// `[frame][agent]` velocity node features; `None` marks an invalid node.
    pub velocities: Vec<Vec<Option<Point>>>,
    pub adjacency: Vec<Array>,
    pub normalized: Vec<Array>,
}

impl SpatioTemporalGraph {
    pub fn build(window: &TrajectoryWindow, kind: Normalization) -> Result<Self> {
        let t_obs = window.t_obs();
        let per_agent = velocity_nodes(window)?;
        let mut positions = Vec::with_capacity(t_obs);
        let mut velocities = Vec::with_capacity(t_obs);
        let mut adj = Vec::with_capacity(t_obs);
        let mut norm = Vec::with_capacity(t_obs);
        let n = window.agent_count();
        for t in 0..t_obs {
            let pos: Vec<Option<Point>> = window.tracks.iter().map(|tr| tr.observed[t]).collect();
            let present: Vec<bool> = pos.iter().map(Option::is_some).collect();
            let a = if present.iter().any(|&p| p) {
                adjacency(&pos)?
            } else {
                Array::zeros(&[n, n])
            };
            norm.push(normalize(&a, &present, kind)?);
            adj.push(a);
            velocities.push(per_agent.iter().map(|v| v[t]).collect());
            positions.push(pos);
        }
        Ok(Self {
            agents: window.tracks.iter().map(|t| t.id).collect(),
            positions,
            velocities,
            adjacency: adj,
            normalized: norm,
        })
    }

    pub fn frames(&self) -> usize {
        self.velocities.len()
    }
}

/// Constant-resolution packing of a slot group.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoImage {
    /// `[T, K, 2]` velocity features, zero for empty slots and invalid nodes.
    pub nodes: Array,
    /// `[T, K, K]` adjacency weights.
    pub adjacency: Array,
    /// Agent id per slot; `None` for an empty slot.
    pub slots: Vec<Option<AgentId>>,
    /// Index into the window's tracks per slot.
    pub slot_tracks: Vec<Option<usize>>,
    /// `[T × K]` row-major validity of each node.
    pub valid: Vec<bool>,
}

impl PseudoImage {
    pub fn frames(&self) -> usize {
        self.nodes.shape()[0]
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn is_valid(&self, t: usize, k: usize) -> bool {
        self.valid[t * self.slot_count() + k]
    }

    /// Filled slot positions in slot order.
    pub fn filled_slots(&self) -> Vec<usize> {
        (0..self.slot_count())
            .filter(|&k| self.slots[k].is_some())
            .collect()
    }

    /// Plain-text listing, frame by frame: the slot map, then one line per
    /// slot with its validity, velocity, and adjacency row.
    pub fn dump(&self) -> String {
        let (t_len, k_len) = (self.frames(), self.slot_count());
        let mut s = String::new();
        let slots: Vec<String> = self
            .slots
            .iter()
            .map(|o| o.map_or_else(|| "EMPTY".to_string(), |id| id.to_string()))
            .collect();
        let _ = writeln!(s, "slots {}", slots.join(" "));
        for t in 0..t_len {
            let _ = writeln!(s, "frame {t}");
            for k in 0..k_len {
                let row: Vec<String> = (0..k_len)
                    .map(|j| format!("{:.6}", self.adjacency.get(&[t, k, j])))
                    .collect();
                let _ = writeln!(
                    s,
                    "  {k} {} v=({:.6}, {:.6}) a=[{}]",
                    u8::from(self.is_valid(t, k)),
                    self.nodes.get(&[t, k, 0]),
                    self.nodes.get(&[t, k, 1]),
                    row.join(" ")
                );
            }
        }
        s
    }
}

/// Packs a graph into pseudo-images of `slots` agents each. Agents are taken
/// in ascending id order; the last group is padded with empty slots, and
/// adjacency between different groups is dropped.
pub fn pseudo_images(graph: &SpatioTemporalGraph, slots: usize) -> Result<Vec<PseudoImage>> {
    if slots == 0 {
        return Err(Error::invalid("slot count K must be at least 1"));
    }
    let mut order: Vec<usize> = (0..graph.agents.len()).collect();
    order.sort_by_key(|&i| graph.agents[i]);
    let t_len = graph.frames();
    let mut images = Vec::new();
    for group in order.chunks(slots) {
        let mut nodes = Array::zeros(&[t_len, slots, 2]);
        let mut adj = Array::zeros(&[t_len, slots, slots]);
        let mut valid = vec![false; t_len * slots];
        for t in 0..t_len {
            for (k, &n) in group.iter().enumerate() {
                let Some(v) = graph.velocities[t][n] else {
                    continue;
                };
                valid[t * slots + k] = true;
                nodes.set(&[t, k, 0], v[0]);
                nodes.set(&[t, k, 1], v[1]);
                for (j, &m) in group.iter().enumerate() {
                    adj.set(&[t, k, j], graph.normalized[t].get(&[n, m]));
                }
            }
        }
        let mut slot_ids = vec![None; slots];
        let mut slot_tracks = vec![None; slots];
        for (k, &n) in group.iter().enumerate() {
            slot_ids[k] = Some(graph.agents[n]);
            slot_tracks[k] = Some(n);
        }
        images.push(PseudoImage {
            nodes,
            adjacency: adj,
            slots: slot_ids,
            slot_tracks,
            valid,
        });
    }
    if images.is_empty() {
        images.push(PseudoImage {
            nodes: Array::zeros(&[t_len, slots, 2]),
            adjacency: Array::zeros(&[t_len, slots, slots]),
            slots: vec![None; slots],
            slot_tracks: vec![None; slots],
            valid: vec![false; t_len * slots],
        });
    }
    Ok(images)
}
