//! Straight-loop recomputations, written from the definitions without any
//! tape operation, and the comparison suite built on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grad::{normal, positive};
use sgtn::attn_adj::{AdjacencyAttention, AttentionMode, ScoreProjection};
use sgtn::diffarray::{Array, ParamStore, Tape};
use sgtn::metrics::{self, RmseAccumulator};
use sgtn::nn::Ctx;
use sgtn::sstg::Point;
use sgtn::sstgcn::{Sstgcn, SstgcnConfig};
use sgtn::txf::{attention, attention_mask};

pub const TOL: f64 = 1e-12;
pub const INSTANCES: u64 = 20;

/// `Z[t,k,o] = Σ_j A[t,k,j] (Σ_c X[t,j,c] W[c,o] + b[o])`.
pub fn spatial_conv(x: &Array, a: &Array, w: &Array, b: &Array) -> Array {
    let (t_len, k_len, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = b.len();
    let mut z = Array::zeros(&[t_len, k_len, cout]);
    for t in 0..t_len {
        for k in 0..k_len {
            for o in 0..cout {
                let mut s = 0.0;
                for j in 0..k_len {
                    let mut h = b.data()[o];
                    for c in 0..cin {
                        h += x.get(&[t, j, c]) * w.get(&[0, 0, c, o]);
                    }
                    s += a.get(&[t, k, j]) * h;
                }
                z.set(&[t, k, o], s);
            }
        }
    }
    z
}

/// Zero-padded 3-tap (or 1-tap) convolution in time, bias, and the residual
/// `V_in` (projected by `wr` when given).
pub fn temporal_conv(z: &Array, v_in: &Array, wt: &Array, bt: &Array, wr: Option<&Array>) -> Array {
    let (t_len, k_len, c) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let h = wt.shape()[0];
    let half = (h as isize - 1) / 2;
    let cin = v_in.shape()[2];
    let mut y = Array::zeros(&[t_len, k_len, c]);
    for t in 0..t_len {
        for k in 0..k_len {
            for o in 0..c {
                let mut s = bt.data()[o];
                for d in 0..h {
                    let src = t as isize + d as isize - half;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    for i in 0..c {
                        s += z.get(&[src as usize, k, i]) * wt.get(&[d, 0, i, o]);
                    }
                }
                s += match wr {
                    Some(wr) => (0..cin)
                        .map(|i| v_in.get(&[t, k, i]) * wr.get(&[0, 0, i, o]))
                        .sum::<f64>(),
                    None => v_in.get(&[t, k, o]),
                };
                y.set(&[t, k, o], s);
            }
        }
    }
    y
}

/// Masked scaled dot-product attention over `[B, H, T, d]`.
pub fn attention_loop(q: &Array, k: &Array, v: &Array, mask: &[bool]) -> Array {
    let s = q.shape();
    let (b, h, tq, d) = (s[0], s[1], s[2], s[3]);
    let tk = k.shape()[2];
    let dv = v.shape()[3];
    let mut out = Array::zeros(&[b, h, tq, dv]);
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..tq {
                let mut scores = vec![f64::NEG_INFINITY; tk];
                for j in 0..tk {
                    if mask[((bi * h + hi) * tq + i) * tk + j] {
                        let dot: f64 = (0..d)
                            .map(|c| q.get(&[bi, hi, i, c]) * k.get(&[bi, hi, j, c]))
                            .sum();
                        scores[j] = dot / (d as f64).sqrt();
                    }
                }
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores
                    .iter()
                    .map(|&s| if s.is_finite() { (s - m).exp() } else { 0.0 })
                    .collect();
                let z: f64 = e.iter().sum();
                for c in 0..dv {
                    let val: f64 = (0..tk).map(|j| e[j] / z * v.get(&[bi, hi, j, c])).sum();
                    out.set(&[bi, hi, i, c], val);
                }
            }
        }
    }
    out
}

/// `softmax_rows((A Wq)(A Wk)ᵀ / √d_k) ⊙ A` per frame; the sparse variant
/// replaces the attention weights by the indicator of `> 0.5`.
pub fn adjacency_attention(a: &Array, wq: &Array, wk: &Array, sparse: bool) -> Array {
    let (t_len, n) = (a.shape()[0], a.shape()[1]);
    let dk = wq.shape()[1];
    let mut out = Array::zeros(&[t_len, n, n]);
    for t in 0..t_len {
        let proj = |w: &Array| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| {
                    (0..dk)
                        .map(|c| (0..n).map(|j| a.get(&[t, i, j]) * w.get(&[j, c])).sum())
                        .collect()
                })
                .collect()
        };
        let (q, k) = (proj(wq), proj(wk));
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dk).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..n {
                let w = (scores[j] - m).exp() / z;
                let w = if sparse {
                    if w > 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    w
                };
                out.set(&[t, i, j], w * a.get(&[t, i, j]));
            }
        }
    }
    out
}

pub fn ade_loop(pred: &[Vec<Point>], gt: &[Vec<Option<Point>>]) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for a in 0..pred.len() {
        for j in 0..pred[a].len() {
            if let Some(g) = gt[a][j] {
                s += ((pred[a][j][0] - g[0]).powi(2) + (pred[a][j][1] - g[1]).powi(2)).sqrt();
                n += 1.0;
            }
        }
    }
    s / n
}

/// RMSE at the step whose time `(j+1)/fps` is closest to each horizon,
/// pooled over every window and agent with ground truth there.
pub fn rmse_loop(
    windows: &[(Vec<Vec<Point>>, Vec<Vec<Option<Point>>>)],
    horizons: &[f64],
    fps: f64,
) -> Vec<f64> {
    horizons
        .iter()
        .map(|&h| {
            let t_pred = windows[0].0[0].len();
            let j = (0..t_pred)
                .min_by(|&a, &b| {
                    let da = ((a + 1) as f64 / fps - h).abs();
                    let db = ((b + 1) as f64 / fps - h).abs();
                    da.total_cmp(&db)
                })
                .unwrap();
            let (mut s, mut n) = (0.0, 0.0);
            for (pred, gt) in windows {
                for a in 0..pred.len() {
                    if let Some(g) = gt[a][j] {
                        s += (pred[a][j][0] - g[0]).powi(2) + (pred[a][j][1] - g[1]).powi(2);
                        n += 1.0;
                    }
                }
            }
            (s / n).sqrt()
        })
        .collect()
}

fn random_paths(
    rng: &mut ChaCha8Rng,
    agents: usize,
    steps: usize,
) -> (Vec<Vec<Point>>, Vec<Vec<Option<Point>>>) {
    let pred = (0..agents)
        .map(|_| {
            (0..steps)
                .map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)])
                .collect()
        })
        .collect();
    let gt = (0..agents)
        .map(|_| {
            (0..steps)
                .map(|j| {
                    (j == 0 || rng.gen_bool(0.9))
                        .then(|| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)])
                })
                .collect()
        })
        .collect();
    (pred, gt)
}

fn param(store: &ParamStore, name: &str) -> Array {
    store
        .value(
            store
                .id(name)
                .unwrap_or_else(|| panic!("no parameter {name}")),
        )
        .clone()
}

/// Worst absolute deviation per operation over `INSTANCES` random instances.
pub fn suite() -> Vec<(&'static str, f64)> {
    let mut worst = vec![
        ("spatial_conv", 0.0f64),
        ("temporal_conv", 0.0),
        ("attention", 0.0),
        ("adjacency_attention_dense", 0.0),
        ("adjacency_attention_sparse", 0.0),
        ("ade", 0.0),
        ("rmse", 0.0),
    ];
    let mut bump = |name: &str, v: f64| {
        let slot = worst.iter_mut().find(|(n, _)| *n == name).unwrap();
        slot.1 = slot.1.max(if v.is_nan() { f64::INFINITY } else { v });
    };
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let t_len = rng.gen_range(2..9);
        let k_len = rng.gen_range(1..9);

        // One layer: its spatial and temporal halves separately.
        let mut store = ParamStore::new();
        let no_temporal = seed % 4 == 3;
        let net = Sstgcn::new(
            &mut store,
            SstgcnConfig {
                no_temporal,
                ..SstgcnConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        // Non-zero biases so they are exercised.
        for name in ["sstgcn.0.bs", "sstgcn.0.bt"] {
            let id = store.id(name).unwrap();
            *store.value_mut(id) = normal(&mut rng, &[5]);
        }
        let x = normal(&mut rng, &[t_len, k_len, 2]);
        let a = positive(&mut rng, &[t_len, k_len, k_len], 0.0, 1.0);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let layer = &net.layers[0];
        let (xv, av) = (tape.constant(x.clone()), tape.constant(a.clone()));
        let z = layer.spatial_conv(&ctx, xv, av).unwrap();
        let z_loop = spatial_conv(
            &x,
            &a,
            &param(&store, "sstgcn.0.ws"),
            &param(&store, "sstgcn.0.bs"),
        );
        bump("spatial_conv", tape.value(z).max_abs_diff(&z_loop));
        let y = layer
            .temporal_conv(&ctx, tape.constant(z_loop.clone()), xv)
            .unwrap();
        let wr = param(&store, "sstgcn.0.wr");
        let y_loop = temporal_conv(
            &z_loop,
            &x,
            &param(&store, "sstgcn.0.wt"),
            &param(&store, "sstgcn.0.bt"),
            Some(&wr),
        );
        bump("temporal_conv", tape.value(y).max_abs_diff(&y_loop));

        // Masked attention with some keys hidden, causal every other time.
        let (b, h, tq, tk, d) = (2, 2, rng.gen_range(1..6), rng.gen_range(1..6), 4);
        let mut valid: Vec<bool> = (0..b * tk).map(|_| rng.gen_bool(0.7)).collect();
        for bi in 0..b {
            valid[bi * tk] = true;
        }
        let causal = seed % 2 == 0;
        let mask = attention_mask(b, h, tq, tk, &valid, causal);
        let (q, k, v) = (
            normal(&mut rng, &[b, h, tq, d]),
            normal(&mut rng, &[b, h, tk, d]),
            normal(&mut rng, &[b, h, tk, 3]),
        );
        let out = attention(
            &ctx,
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
            Some(&mask),
        )
        .unwrap();
        bump(
            "attention",
            tape.value(out)
                .max_abs_diff(&attention_loop(&q, &k, &v, &mask)),
        );

        for (mode, name, sparse) in [
            (AttentionMode::Dense, "adjacency_attention_dense", false),
            (AttentionMode::Sparse, "adjacency_attention_sparse", true),
        ] {
            let mut store = ParamStore::new();
            let attn = AdjacencyAttention::new(
                &mut store,
                k_len,
                8,
                mode,
                ScoreProjection::Learned,
                &mut rng,
            )
            .unwrap();
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &store);
            let out = attn.apply(&ctx, tape.constant(a.clone())).unwrap();
            let expect = adjacency_attention(
                &a,
                &param(&store, "attn_adj.wq"),
                &param(&store, "attn_adj.wk"),
                sparse,
            );
            bump(name, tape.value(out).max_abs_diff(&expect));
        }

        let agents = rng.gen_range(1..6);
        let (pred, gt) = random_paths(&mut rng, agents, 12);
        bump(
            "ade",
            (metrics::ade(&pred, &gt).unwrap() - ade_loop(&pred, &gt)).abs(),
        );

        let horizons = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ws: Vec<_> = (0..rng.gen_range(1..4))
            .map(|_| random_paths(&mut rng, agents, 25))
            .collect();
        let mut acc = RmseAccumulator::new(&horizons, 5.0, 25).unwrap();
        for (p, g) in &ws {
            acc.add(p, g).unwrap();
        }
        let got = acc.finish().unwrap();
        let expect = rmse_loop(&ws, &horizons, 5.0);
        bump(
            "rmse",
            got.iter()
                .zip(&expect)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    worst
}
