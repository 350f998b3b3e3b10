//! Acceptance checks that are cheap enough to share with the ordinary suites.
//! Each returns whether it held and a one-line summary of what was measured.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gen::{random_window, scene_windows};
use super::{grad, oracle};
use sgtn::attn_adj::AttentionMode;
use sgtn::data_io::Scenario;
use sgtn::diffarray::{Array, ParamStore, Tape};
use sgtn::gauss_head::{self, project_raw, sample_trajectories, Bivariate};
use sgtn::metrics::{self, ColUnit};
use sgtn::nn::Ctx;
use sgtn::pipeline::{ForwardOptions, Mode, Model, ModelConfig};
use sgtn::sstg::{
    adjacency, normalize, pseudo_images, Normalization, SpatioTemporalGraph, TrajectoryWindow,
};
use sgtn::trainer::{train, train_with, TrainConfig};
use sgtn::txf::{Transformer, TransformerConfig};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Self::new(false, detail)
    }
}

/// Central differences on every operation and on the full loss.
pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst_prim = (0.0f64, "");
    for case in grad::cases() {
        match grad::run_case(&case) {
            Ok(e) if e.is_finite() => {
                if e > worst_prim.0 {
                    worst_prim = (e, case.name);
                }
            }
            Ok(e) => return Outcome::fail(format!("{}: relative error {e}", case.name)),
            Err(e) => return Outcome::fail(format!("{}: {e}", case.name)),
        }
    }
    let mut worst_model = 0.0f64;
    for seed in 0..grad::INSTANCES {
        let mode = [
            AttentionMode::Off,
            AttentionMode::Dense,
            AttentionMode::Sparse,
        ][seed as usize % 3];
        match grad::model_check(seed, mode, 24) {
            Ok(e) => worst_model = worst_model.max(if e.is_nan() { f64::INFINITY } else { e }),
            Err(e) => return Outcome::fail(format!("model seed {seed}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let cases = grad::cases().len();
    Outcome::new(
        worst_prim.0 < grad::PRIMITIVE_TOL && worst_model < grad::MODEL_TOL && secs < 120.0,
        format!(
            "{cases} operations x {} instances, worst {:.1e} ({}); full loss worst {worst_model:.1e}; {secs:.1} s",
            grad::INSTANCES,
            worst_prim.0,
            worst_prim.1
        ),
    )
}

pub fn loop_oracle_suite() -> Outcome {
    let results = oracle::suite();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let bad: Vec<String> = results
        .iter()
        .filter(|r| !(r.1 <= oracle::TOL))
        .map(|r| format!("{} {:.1e}", r.0, r.1))
        .collect();
    Outcome::new(
        bad.is_empty(),
        if bad.is_empty() {
            format!(
                "{} checks x {} instances, worst deviation {worst:.1e}",
                results.len(),
                oracle::INSTANCES
            )
        } else {
            bad.join(", ")
        },
    )
}

/// Checks one window's pseudo-images; `Err` names the first violation.
pub fn check_pseudo_images(
    window: &TrajectoryWindow,
    slots: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), String> {
    let t_len = window.t_obs();
    let n = window.agent_count();
    let graph =
        SpatioTemporalGraph::build(window, Normalization::Symmetric).map_err(|e| e.to_string())?;
    let images = pseudo_images(&graph, slots).map_err(|e| e.to_string())?;
    if images.len() != n.div_ceil(slots) {
        return Err(format!(
            "{} images for {n} agents and K = {slots}",
            images.len()
        ));
    }
    for img in &images {
        if img.nodes.shape() != [t_len, slots, 2] || img.adjacency.shape() != [t_len, slots, slots]
        {
            return Err(format!(
                "shapes {:?} / {:?}",
                img.nodes.shape(),
                img.adjacency.shape()
            ));
        }
        for k in 0..slots {
            let track = img.slot_tracks[k];
            for t in 0..t_len {
                let absent = track.is_none_or(|tr| window.tracks[tr].observed[t].is_none());
                if !absent {
                    continue;
                }
                let row_col_zero = (0..slots).all(|j| {
                    img.adjacency.get(&[t, k, j]) == 0.0 && img.adjacency.get(&[t, j, k]) == 0.0
                });
                let node_zero =
                    img.nodes.get(&[t, k, 0]) == 0.0 && img.nodes.get(&[t, k, 1]) == 0.0;
                if !(row_col_zero && node_zero && !img.is_valid(t, k)) {
                    return Err(format!("empty slot {k} at frame {t} is not zero"));
                }
            }
        }
    }

    // Relabel with fresh distinct ids; track order changes with the ids.
    let mut fresh: Vec<u64> = (5000..6000).collect();
    fresh.shuffle(rng);
    let mut relabeled = window.clone();
    for (tr, &id) in relabeled.tracks.iter_mut().zip(&fresh) {
        tr.id = id;
    }
    let relabeled =
        TrajectoryWindow::new(relabeled.frames.clone(), relabeled.t_pred, relabeled.tracks)
            .map_err(|e| e.to_string())?;
    let new_index: Vec<usize> = (0..n)
        .map(|i| {
            relabeled
                .tracks
                .iter()
                .position(|t| t.id == fresh[i])
                .expect("relabelled")
        })
        .collect();
    let g2 = SpatioTemporalGraph::build(&relabeled, Normalization::Symmetric)
        .map_err(|e| e.to_string())?;
    for t in 0..t_len {
        for i in 0..n {
            if graph.velocities[t][i] != g2.velocities[t][new_index[i]] {
                return Err(format!(
                    "velocity of agent {i} at frame {t} changed under relabelling"
                ));
            }
            for j in 0..n {
                let (a, b) = (
                    graph.normalized[t].get(&[i, j]),
                    g2.normalized[t].get(&[new_index[i], new_index[j]]),
                );
                if a.to_bits() != b.to_bits() {
                    return Err(format!(
                        "normalised adjacency ({i},{j}) at frame {t}: {a} vs {b}"
                    ));
                }
            }
        }
    }
    if n <= slots {
        let i2 = pseudo_images(&g2, slots).map_err(|e| e.to_string())?;
        let (a, b) = (&images[0], &i2[0]);
        for t in 0..t_len {
            for i in 0..n {
                let pi = new_index[i];
                for c in 0..2 {
                    if a.nodes.get(&[t, i, c]).to_bits() != b.nodes.get(&[t, pi, c]).to_bits() {
                        return Err(format!("node ({t},{i}) not permuted exactly"));
                    }
                }
                for j in 0..n {
                    if a.adjacency.get(&[t, i, j]).to_bits()
                        != b.adjacency.get(&[t, pi, new_index[j]]).to_bits()
                    {
                        return Err(format!("adjacency ({t},{i},{j}) not permuted exactly"));
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn pseudo_image_invariants(count: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..count {
        let n = rng.gen_range(1..=10);
        let k = rng.gen_range(1..=8);
        let t = rng.gen_range(2..=8);
        let w = random_window(&mut rng, n, t, 0);
        if let Err(e) = check_pseudo_images(&w, k, &mut rng) {
            return Outcome::fail(format!("window {i} (N={n}, K={k}, T={t}): {e}"));
        }
    }
    Outcome::new(
        true,
        format!("{count} random windows, N in 1..10, K in 1..8, T in 2..8"),
    )
}

/// Spectrum of symmetric normalised adjacency matrices of random graphs.
pub fn normalization_crosscheck(graphs: usize) -> Outcome {
    let a = adjacency(&[Some([0.0, 0.0]), Some([1.0, 0.0])]).unwrap();
    let n = normalize(&a, &[true, true], Normalization::Symmetric).unwrap();
    if n.data() != [0.5, 0.5, 0.5, 0.5] {
        return Outcome::fail(format!("unit-distance pair normalises to {:?}", n.data()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..graphs {
        let size = rng.gen_range(1..=10);
        let mut pos: Vec<Option<[f64; 2]>> = (0..size)
            .map(|_| {
                rng.gen_bool(0.8)
                    .then(|| [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)])
            })
            .collect();
        pos[0].get_or_insert([0.0, 0.0]);
        let present: Vec<bool> = pos.iter().map(Option::is_some).collect();
        let a = adjacency(&pos).unwrap();
        let m = normalize(&a, &present, Normalization::Symmetric).unwrap();
        let eig = DMatrix::from_row_slice(size, size, m.data()).symmetric_eigen();
        for &e in eig.eigenvalues.iter() {
            lo = lo.min(e);
            hi = hi.max(e);
        }
    }
    let tol = 1e-12;
    Outcome::new(
        lo >= -1.0 - tol && hi <= 1.0 + tol,
        format!("2-agent case exact; eigenvalues of {graphs} graphs in [{lo:.6}, {hi:.15}]"),
    )
}

/// Class-weighted sums of known constant-velocity per-class errors.
pub fn weighted_sum_arithmetic() -> Outcome {
    let wsade = metrics::weighted_sums(2.65, 0.85, 2.05);
    let wsfde = metrics::weighted_sums(4.79, 1.64, 3.86);
    let pass = (wsade - 1.474).abs() <= 0.005
        && (wsfde - 2.7584).abs() <= 0.005
        && (wsade - 1.48).abs() <= 0.01
        && (wsfde - 2.76).abs() <= 0.01;
    Outcome::new(
        pass,
        format!("WSADE {wsade:.4} (reported 1.48), WSFDE {wsfde:.4} (reported 2.76)"),
    )
}

pub fn distribution_suite() -> Outcome {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // Positive definiteness of projected parameters.
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &store);
    let raw = tape.constant(Array::from_fn(&[100, 100, 5], |_| rng.gen_range(-6.0..6.0)));
    let field = match project_raw(&ctx, raw).and_then(|f| f.to_field(&ctx)) {
        Ok(f) => f,
        Err(e) => return Outcome::fail(format!("projection: {e}")),
    };
    let pd = field
        .iter()
        .flatten()
        .filter(|b| b.is_positive_definite())
        .count();
    if pd != 10_000 {
        return Outcome::fail(format!("{pd} of 10000 projections positive definite"));
    }

    // NLL of the mean under unit, uncorrelated scale.
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &store);
    let f = project_raw(&ctx, tape.constant(Array::zeros(&[1, 1, 5]))).unwrap();
    let nll = gauss_head::nll_loss(&ctx, &f, &Array::zeros(&[1, 1, 2]), &[true]).unwrap();
    let nll = tape.value(nll.sum).item();
    let log2pi = (2.0 * std::f64::consts::PI).ln();
    if (nll - log2pi).abs() > 1e-9 {
        return Outcome::fail(format!("NLL at the mean {nll}, expected {log2pi}"));
    }

    // Sampler moments at 1e5 draws.
    let g = Bivariate::new([1.0, -2.0], [0.5, 2.0], 0.6).unwrap();
    let n = 100_000;
    let draws: Vec<[f64; 2]> = (0..n).map(|_| g.sample(&mut rng)).collect();
    let nf = n as f64;
    let mean = |c: usize| draws.iter().map(|d| d[c]).sum::<f64>() / nf;
    let (mx, my) = (mean(0), mean(1));
    let cov = |a: usize, b: usize, ma: f64, mb: f64| {
        draws.iter().map(|d| (d[a] - ma) * (d[b] - mb)).sum::<f64>() / (nf - 1.0)
    };
    let (vx, vy, cxy) = (cov(0, 0, mx, mx), cov(1, 1, my, my), cov(0, 1, mx, my));
    let [[sxx, sxy], [_, syy]] = g.covariance();
    let checks = [
        ("mean x", mx, g.mu[0], (sxx / nf).sqrt()),
        ("mean y", my, g.mu[1], (syy / nf).sqrt()),
        ("var x", vx, sxx, sxx * (2.0 / (nf - 1.0)).sqrt()),
        ("var y", vy, syy, syy * (2.0 / (nf - 1.0)).sqrt()),
        ("cov", cxy, sxy, ((sxx * syy + sxy * sxy) / nf).sqrt()),
    ];
    let mut worst_z = 0.0f64;
    for (name, got, want, se) in checks {
        let z = (got - want).abs() / se;
        if z > 3.0 {
            return Outcome::fail(format!("{name}: {got} vs {want} ({z:.2} standard errors)"));
        }
        worst_z = worst_z.max(z);
    }

    // Seeded sampling is reproducible.
    let fields = vec![vec![g; 12]; 3];
    let last = vec![[0.0, 0.0]; 3];
    let a = sample_trajectories(&fields, &last, 20, 99).unwrap();
    let b = sample_trajectories(&fields, &last, 20, 99).unwrap();
    let bits = |s: &Vec<Vec<Vec<[f64; 2]>>>| {
        s.iter()
            .flatten()
            .flatten()
            .flat_map(|p| [p[0].to_bits(), p[1].to_bits()])
            .collect::<Vec<_>>()
    };
    if bits(&a) != bits(&b) {
        return Outcome::fail("same seed gave different samples");
    }
    Outcome::new(
        true,
        format!("10000 projections PD; NLL at mean = log 2pi (err {:.1e}); moments within {worst_z:.2} SE; seeded samples identical", (nll - log2pi).abs()),
    )
}

fn bits(a: &Array) -> Vec<u64> {
    a.data().iter().map(|v| v.to_bits()).collect()
}

/// Decoder outputs never depend on later inputs; encoder memory at valid
/// frames never depends on masked frames.
pub fn causality_and_masking() -> Outcome {
    let mut probes = 0;
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = TransformerConfig {
            layers: 2,
            norm_first: seed % 2 == 1,
            ..TransformerConfig::default()
        };
        let txf = Transformer::new(&mut store, cfg, 5, &mut rng).unwrap();
        let (b, t_obs, t_pred) = (3, 8, 6);
        let feats = grad::normal(&mut rng, &[b, t_obs, 5]);
        let mut valid: Vec<bool> = (0..b * t_obs).map(|_| rng.gen_bool(0.6)).collect();
        for bi in 0..b {
            valid[bi * t_obs + t_obs - 1] = true;
        }
        let obs_ts: Vec<f64> = (1..=t_obs).map(|t| t as f64).collect();
        let fut_ts: Vec<f64> = (t_obs + 1..=t_obs + t_pred).map(|t| t as f64).collect();

        let encode = |x: &Array| {
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &store);
            let m = txf
                .encode(&ctx, tape.constant(x.clone()), &obs_ts, &valid)
                .unwrap();
            (*tape.value(m.hidden)).clone()
        };
        let base = encode(&feats);
        let mut perturbed = feats.clone();
        for bi in 0..b {
            for t in 0..t_obs {
                if !valid[bi * t_obs + t] {
                    for c in 0..5 {
                        perturbed.set(&[bi, t, c], rng.gen_range(-1e3..1e3));
                    }
                }
            }
        }
        let after = encode(&perturbed);
        let d = base.shape()[2];
        for bi in 0..b {
            for t in 0..t_obs {
                for c in 0..d {
                    let (x, y) = (base.get(&[bi, t, c]), after.get(&[bi, t, c]));
                    if valid[bi * t_obs + t] && x.to_bits() != y.to_bits() || x != y {
                        return Outcome::fail(format!(
                            "encoder output ({bi},{t},{c}) moved under masked-frame perturbation"
                        ));
                    }
                }
            }
        }
        probes += 1;

        let inputs = grad::normal(&mut rng, &[b, t_pred, 2]);
        let decode = |x: &Array| {
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &store);
            let m = txf
                .encode(&ctx, tape.constant(feats.clone()), &obs_ts, &valid)
                .unwrap();
            let h = txf
                .decode_inputs(&ctx, &m, tape.constant(x.clone()), &fut_ts)
                .unwrap();
            (*tape.value(h)).clone()
        };
        let base = decode(&inputs);
        for j in 0..t_pred - 1 {
            let mut x = inputs.clone();
            for bi in 0..b {
                for s in j + 1..t_pred {
                    x.set(&[bi, s, 0], rng.gen_range(-50.0..50.0));
                    x.set(&[bi, s, 1], rng.gen_range(-50.0..50.0));
                }
            }
            let out = decode(&x);
            for bi in 0..b {
                for s in 0..=j {
                    for c in 0..d {
                        if base.get(&[bi, s, c]).to_bits() != out.get(&[bi, s, c]).to_bits() {
                            return Outcome::fail(format!(
                                "decoder step {s} depends on inputs after step {j}"
                            ));
                        }
                    }
                }
            }
            probes += 1;
        }
    }

    // Through the whole model: ground truth at future step m only reaches
    // predictions for steps after m.
    let model = Model::new(ModelConfig::default(), 1).unwrap();
    let window = scene_windows(Scenario::Crowd(4), 3, 0.05).remove(0);
    let field_bits = |w: &TrajectoryWindow| {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &model.params);
        let g = model
            .forward(&ctx, w, Mode::TeacherForced, &ForwardOptions::default())
            .unwrap();
        let f = &g[0].field;
        [
            bits(&tape.value(f.mu)),
            bits(&tape.value(f.log_sigma)),
            bits(&tape.value(f.rho_raw)),
        ]
    };
    let base = field_bits(&window);
    for m in 0..11 {
        let mut w = window.clone();
        for tr in &mut w.tracks {
            if let Some(p) = tr.future[m].as_mut() {
                p[0] += 3.0;
                p[1] -= 2.0;
            }
        }
        let after = field_bits(&w);
        for (q, (x, y)) in base.iter().zip(&after).enumerate() {
            let per_step = if q == 2 { 1 } else { 2 };
            let per_seq = 12 * per_step;
            for seq in 0..x.len() / per_seq {
                let upto = (m + 1) * per_step;
                if x[seq * per_seq..][..upto] != y[seq * per_seq..][..upto] {
                    return Outcome::fail(format!(
                        "model prediction at or before step {m} moved when step {m} truth changed"
                    ));
                }
            }
            if q == 0 && x == y {
                return Outcome::fail(format!(
                    "changing truth at step {m} changed nothing downstream"
                ));
            }
        }
        probes += 1;
    }
    Outcome::new(true, format!("{probes} perturbation probes, all bit-exact"))
}

/// Ground-truth COL on the opposing-pair scene equals the generator's
/// designed outcome.
pub fn collision_ground_truth(seeds: u64) -> Outcome {
    let mut details = Vec::new();
    for (collide, want) in [(false, 0.0), (true, 100.0)] {
        let mut windows = Vec::new();
        for seed in 0..seeds {
            for w in scene_windows(Scenario::OpposingPair { collide }, seed, 0.0) {
                windows.push(
                    w.tracks
                        .iter()
                        .map(|t| t.future.iter().map(|p| p.unwrap()).collect::<Vec<_>>())
                        .collect::<Vec<_>>(),
                );
            }
        }
        let col = metrics::col(&windows, metrics::COLLISION_THRESHOLD, ColUnit::Window).unwrap();
        if col != want {
            return Outcome::fail(format!("collide = {collide}: COL {col}, expected {want}"));
        }
        details.push(format!(
            "{} {col}",
            if collide { "crossing" } else { "avoiding" }
        ));
    }
    Outcome::new(
        true,
        format!("COL on truth over {seeds} scenes: {}", details.join(", ")),
    )
}

fn small_model(lambda: f64) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.transformer.layers = 1;
    c.nce.lambda = lambda;
    c
}

/// `total - nll = λ·nce` at every logged step of a λ = 1 run.
pub fn loss_composition(windows: &[TrajectoryWindow]) -> Outcome {
    let lambda = 1.0;
    let mut model = Model::new(small_model(lambda), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let mut logs = Vec::new();
    if let Err(e) = train_with(&mut model, windows, &[], &cfg, |s| logs.push(s.clone())) {
        return Outcome::fail(e.to_string());
    }
    let mut worst = 0.0f64;
    let mut with_nce = 0;
    for s in &logs {
        let expected = s.nce.map_or(0.0, |n| lambda * n);
        with_nce += s.nce.is_some() as usize;
        worst = worst.max((s.total - s.nll - expected).abs());
    }
    Outcome::new(
        worst <= 1e-9 && with_nce > 0,
        format!("{} steps ({with_nce} with contrastive term), max |total - nll - lambda*nce| = {worst:.1e}", logs.len()),
    )
}

/// Identical runs give identical manifests; checkpoints round-trip forward
/// outputs bit for bit.
pub fn determinism_and_persistence(
    train_w: &[TrajectoryWindow],
    val_w: &[TrajectoryWindow],
) -> Outcome {
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut config = small_model(1.0);
    config.transformer.dropout = 0.1;
    let run = || {
        let mut m = Model::new(config.clone(), cfg.seed).unwrap();
        let manifest = train(&mut m, train_w, val_w, &cfg).unwrap();
        (m, manifest)
    };
    let (m1, r1) = run();
    let (_, r2) = run();
    if !r1.same_run(&r2) {
        return Outcome::fail("identical runs produced different manifests");
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.sgtn");
    m1.save(&path).unwrap();
    let mut loaded = Model::new(config.clone(), 999).unwrap();
    loaded.load(&path).unwrap();
    for w in val_w.iter().take(5) {
        let (a, b) = (
            m1.predict_multimodal(w, 5, 1).unwrap(),
            loaded.predict_multimodal(w, 5, 1).unwrap(),
        );
        let flat = |p: &sgtn::pipeline::Prediction| -> Vec<u64> {
            p.samples
                .iter()
                .flatten()
                .flatten()
                .flat_map(|q| [q[0].to_bits(), q[1].to_bits()])
                .collect()
        };
        if flat(&a) != flat(&b) {
            return Outcome::fail("loaded checkpoint predicts differently");
        }
        let means = |p: &sgtn::pipeline::Prediction| -> Vec<u64> {
            p.agents
                .iter()
                .flat_map(|a| a.mean_path())
                .flat_map(|q| [q[0].to_bits(), q[1].to_bits()])
                .collect()
        };
        if means(&a) != means(&b) {
            return Outcome::fail("loaded checkpoint gives different means");
        }
    }
    Outcome::new(
        true,
        format!("2 runs x {} steps identical up to wall clock; checkpoint of {} parameters round-trips bit-exactly", r1.steps.len(), m1.parameter_count()),
    )
}
