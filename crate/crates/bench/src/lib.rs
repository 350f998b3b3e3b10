//! Fixtures shared by the benchmarks in `benches/`.

use sgtn::data_io::{synth, windows, Scenario, SynthSpec};
use sgtn::diffarray::Array;
use sgtn::sstg::TrajectoryWindow;

/// First 8/12 window of a noisy crowd of `agents`.
pub fn crowd_window(agents: usize) -> TrajectoryWindow {
    let table = synth(&SynthSpec {
        scenario: Scenario::Crowd(agents),
        noise: 0.05,
        seed: 11,
        frames: 20,
    })
    .expect("valid crowd");
    windows(&table, 8, 12, 1)
        .expect("20 frames hold one window")
        .remove(0)
}

/// Deterministic, non-degenerate values in (-1, 1).
pub fn filled(shape: &[usize]) -> Array {
    Array::from_fn(shape, |i| (i as f64 * 0.618_034 + 0.1).sin())
}
