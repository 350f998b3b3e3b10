use std::collections::BTreeMap;

use super::table::TrajectoryTable;
use crate::error::{Error, Result};
use crate::sstg::{AgentClass, AgentId, AgentTrack, Point, TrajectoryWindow};

/// Sliding windows of `t_obs + t_pred` frames on the table's frame grid,
/// advancing `stride` frames at a time. An agent enters a window when it is
/// present in at least two observed frames; windows with no such agent are
/// skipped.
pub fn windows(
    table: &TrajectoryTable,
    t_obs: usize,
    t_pred: usize,
    stride: usize,
) -> Result<Vec<TrajectoryWindow>> {
    if t_obs == 0 || stride == 0 {
        return Err(Error::invalid("t_obs and stride must be at least 1"));
    }
    let frames = table.frames();
    let (Some(&first), Some(&last)) = (frames.first(), frames.last()) else {
        return Ok(Vec::new());
    };
    let fs = table.frame_stride();
    let span = (t_obs + t_pred) as i64;
    let by_frame = table.by_frame();
    let mut classes: BTreeMap<AgentId, AgentClass> = BTreeMap::new();
    for r in table.rows() {
        if let Some(c) = r.class {
            classes.entry(r.agent).or_insert(c);
        }
    }
    let mut out = Vec::new();
    let mut anchor = first;
    while anchor + (span - 1) * fs <= last {
        let grid: Vec<i64> = (0..span).map(|i| anchor + i * fs).collect();
        // agent -> per-frame position over the whole span
        let mut seen: BTreeMap<AgentId, Vec<Option<Point>>> = BTreeMap::new();
        for (i, f) in grid.iter().enumerate() {
            for r in by_frame.get(f).copied().unwrap_or(&[]) {
                seen.entry(r.agent)
                    .or_insert_with(|| vec![None; grid.len()])[i] = Some([r.x, r.y]);
            }
        }
        let tracks: Vec<AgentTrack> = seen
            .into_iter()
            .filter(|(_, p)| p[..t_obs].iter().filter(|q| q.is_some()).count() >= 2)
            .map(|(id, p)| AgentTrack {
                id,
                class: classes.get(&id).copied(),
                observed: p[..t_obs].to_vec(),
                future: p[t_obs..].to_vec(),
            })
            .collect();
        if !tracks.is_empty() {
            out.push(TrajectoryWindow::new(
                grid[..t_obs].to_vec(),
                t_pred,
                tracks,
            )?);
        }
        anchor += stride as i64 * fs;
    }
    Ok(out)
}

/// First and last frame covered by a window, future included.
pub fn window_span(w: &TrajectoryWindow) -> (i64, i64) {
    let last = w.frames[0] + (w.t_obs() + w.t_pred - 1) as i64 * w.stride();
    (w.frames[0], last)
}
