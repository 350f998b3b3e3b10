//! Random and synthetic windows.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sgtn::data_io::{synth, windows, Scenario, SynthSpec};
use sgtn::sstg::{AgentTrack, TrajectoryWindow};

/// The 8/12 windows of a 20-frame crowd scene.
pub fn crowd_windows(agents: usize, seed: u64, noise: f64) -> Vec<TrajectoryWindow> {
    scene_windows(Scenario::Crowd(agents), seed, noise)
}

pub fn scene_windows(scenario: Scenario, seed: u64, noise: f64) -> Vec<TrajectoryWindow> {
    let table = synth(&SynthSpec {
        scenario,
        noise,
        seed,
        frames: 20,
    })
    .unwrap();
    windows(&table, 8, 12, 1).unwrap()
}

/// `n` agents with distinct random ids over `t_obs` frames; each agent is
/// present on a random subset of at least two frames.
pub fn random_window(
    rng: &mut ChaCha8Rng,
    n: usize,
    t_obs: usize,
    t_pred: usize,
) -> TrajectoryWindow {
    let mut ids: Vec<u64> = (1..1000).collect();
    ids.shuffle(rng);
    let tracks = ids[..n]
        .iter()
        .map(|&id| {
            let mut present: Vec<bool> = (0..t_obs).map(|_| rng.gen_bool(0.7)).collect();
            while present.iter().filter(|&&p| p).count() < 2 {
                let i = rng.gen_range(0..t_obs);
                present[i] = true;
            }
            let observed = present
                .iter()
                .map(|&p| p.then(|| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]))
                .collect();
            let future = (0..t_pred)
                .map(|_| Some([rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]))
                .collect();
            AgentTrack {
                id,
                class: None,
                observed,
                future,
            }
        })
        .collect();
    let start = rng.gen_range(0..100);
    TrajectoryWindow::new(
        (0..t_obs as i64).map(|t| start + t).collect(),
        t_pred,
        tracks,
    )
    .unwrap()
}

/// The 8/12 windows of `count` 20-frame scenes cycling through the corpus
/// scenarios.
pub fn corpus_windows(count: usize, noise: f64, seed: u64) -> Vec<TrajectoryWindow> {
    sgtn::data_io::synthetic_corpus(count, noise, seed, 20)
        .unwrap()
        .iter()
        .flat_map(|(_, t)| windows(t, 8, 12, 1).unwrap())
        .collect()
}
