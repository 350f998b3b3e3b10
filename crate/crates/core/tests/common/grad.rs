//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sgtn::attn_adj::{AdjacencyAttention, AttentionMode, ScoreProjection};
use sgtn::diffarray::{Array, ParamStore, Tape, Var};
use sgtn::gauss_head::{self, project_raw};
use sgtn::nn::{Ctx, LayerNorm, Linear};
use sgtn::pipeline::{Model, ModelConfig};
use sgtn::sstgcn::{Sstgcn, SstgcnConfig};
use sgtn::trainer::batch_loss;
use sgtn::txf::{attention, attention_mask, MultiHeadAttention};
use sgtn::Result;

pub const STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 10;

pub type Loss = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;

/// One differentiable operation: a generator of inputs and the function of
/// them under test.
pub struct Case {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> (Vec<Array>, Loss),
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Magnitudes in `[lo, hi]` with random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    Array::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn positive(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    Array::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let an: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = an.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Relative error between backward and central differences of
/// `Σ f(inputs) ⊙ R` for a fixed random `R`, over every input element.
pub fn check(inputs: &[Array], f: &Loss, seed: u64) -> Result<f64> {
    let project = |t: &Tape, out: Var, r: &Option<Array>| -> Result<Var> {
        match r {
            Some(r) => t.sum(t.mul(out, t.constant(r.clone()))?),
            None => Ok(out),
        }
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    let out = f(&tape, &vars)?;
    let shape = tape.shape(out);
    let weights =
        (!shape.is_empty()).then(|| normal(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xfeed), &shape));
    let loss = project(&tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Array]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|a| t.constant(a.clone())).collect();
        let o = f(&t, &vs)?;
        let l = project(&t, o, &weights)?;
        let v = t.value(l).item();
        Ok(v)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut xs = inputs.to_vec();
    for i in 0..inputs.len() {
        let g = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Array::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * STEP));
            analytic.push(g.data()[j]);
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

/// Worst relative error of `case` over `INSTANCES` seeded instances.
pub fn run_case(case: &Case) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, f) = (case.build)(&mut rng);
        worst = worst.max(check(&inputs, &f, seed)?);
    }
    Ok(worst)
}

macro_rules! case {
    ($name:literal, |$rng:ident| $body:expr) => {
        Case {
            name: $name,
            build: |$rng| $body,
        }
    };
}

fn boxed(f: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static) -> Loss {
    Box::new(f)
}

/// Every tape operation plus the layers built from them.
pub fn cases() -> Vec<Case> {
    vec![
        case!("add", |r| (
            vec![normal(r, &[3, 4]), normal(r, &[4])],
            boxed(|t, v| t.add(v[0], v[1]))
        )),
        case!("sub", |r| (
            vec![normal(r, &[2, 3]), normal(r, &[2, 3])],
            boxed(|t, v| t.sub(v[0], v[1]))
        )),
        case!("mul", |r| (
            vec![normal(r, &[2, 3, 2]), normal(r, &[3, 1])],
            boxed(|t, v| t.mul(v[0], v[1]))
        )),
        case!("div", |r| (
            vec![normal(r, &[3, 3]), away_from_zero(r, &[3, 3], 0.5, 2.0)],
            boxed(|t, v| t.div(v[0], v[1]))
        )),
        case!("exp", |r| (
            vec![normal(r, &[6])],
            boxed(|t, v| t.exp(v[0]))
        )),
        case!("log", |r| (
            vec![positive(r, &[6], 0.3, 3.0)],
            boxed(|t, v| t.log(v[0]))
        )),
        case!("tanh", |r| (
            vec![normal(r, &[6])],
            boxed(|t, v| t.tanh(v[0]))
        )),
        case!("neg", |r| (
            vec![normal(r, &[6])],
            boxed(|t, v| t.neg(v[0]))
        )),
        case!("sqrt", |r| (
            vec![positive(r, &[6], 0.3, 3.0)],
            boxed(|t, v| t.sqrt(v[0]))
        )),
        case!("relu", |r| (
            vec![away_from_zero(r, &[8], 0.05, 2.0)],
            boxed(|t, v| t.relu(v[0]))
        )),
        case!("add_scalar", |r| (
            vec![normal(r, &[4])],
            boxed(|t, v| t.add_scalar(v[0], 0.7))
        )),
        case!("mul_scalar", |r| (
            vec![normal(r, &[4])],
            boxed(|t, v| t.mul_scalar(v[0], -1.3))
        )),
        case!("matmul", |r| (
            vec![normal(r, &[3, 4]), normal(r, &[4, 2])],
            boxed(|t, v| t.matmul(v[0], v[1]))
        )),
        case!("matmul_batched", |r| (
            vec![normal(r, &[2, 3, 4]), normal(r, &[2, 4, 3])],
            boxed(|t, v| t.matmul(v[0], v[1]))
        )),
        case!("matmul_shared_rhs", |r| (
            vec![normal(r, &[2, 3, 4]), normal(r, &[4, 2])],
            boxed(|t, v| t.matmul(v[0], v[1]))
        )),
        case!("transpose", |r| (
            vec![normal(r, &[2, 3, 4])],
            boxed(|t, v| t.transpose(v[0]))
        )),
        case!("permute", |r| (
            vec![normal(r, &[2, 3, 4])],
            boxed(|t, v| t.permute(v[0], &[2, 0, 1]))
        )),
        case!("reshape", |r| (
            vec![normal(r, &[2, 6])],
            boxed(|t, v| t.reshape(v[0], &[3, 4]))
        )),
        case!("conv2d_3x1", |r| (
            vec![normal(r, &[5, 3, 2]), normal(r, &[3, 1, 2, 4])],
            boxed(|t, v| t.conv2d(v[0], v[1], 1))
        )),
        case!("conv2d_1x1", |r| (
            vec![normal(r, &[4, 3, 2]), normal(r, &[1, 1, 2, 5])],
            boxed(|t, v| t.conv2d(v[0], v[1], 0))
        )),
        case!("softmax", |r| (
            vec![normal(r, &[3, 5])],
            boxed(|t, v| t.softmax(v[0], 1))
        )),
        case!("softmax_axis0", |r| (
            vec![normal(r, &[4, 3])],
            boxed(|t, v| t.softmax(v[0], 0))
        )),
        case!("softmax_masked", |r| (
            vec![normal(r, &[2, 4])],
            boxed(|t, v| t.softmax_masked(
                v[0],
                1,
                Some(&[true, false, true, true, false, true, true, false])
            ))
        )),
        case!("sum", |r| (
            vec![normal(r, &[3, 4])],
            boxed(|t, v| t.sum(v[0]))
        )),
        case!("mean", |r| (
            vec![normal(r, &[3, 4])],
            boxed(|t, v| t.mean(v[0]))
        )),
        case!("sum_axis", |r| (
            vec![normal(r, &[3, 4, 2])],
            boxed(|t, v| t.sum_axis(v[0], 1, false))
        )),
        case!("mean_axis_keepdim", |r| (
            vec![normal(r, &[3, 4])],
            boxed(|t, v| t.mean_axis(v[0], 1, true))
        )),
        case!("narrow", |r| (
            vec![normal(r, &[3, 5])],
            boxed(|t, v| t.narrow(v[0], 1, 1, 3))
        )),
        case!("index_select", |r| (
            vec![normal(r, &[4, 3])],
            boxed(|t, v| t.index_select(v[0], 0, &[2, 0, 2]))
        )),
        case!("concat", |r| (
            vec![normal(r, &[2, 3]), normal(r, &[1, 3])],
            boxed(|t, v| t.concat(&[v[0], v[1]], 0))
        )),
        case!("linear", |r| {
            let mut store = ParamStore::new();
            let lin = Linear::new(&mut store, "l", 4, 3, true, r).unwrap();
            (
                vec![normal(r, &[2, 5, 4])],
                boxed(move |t, v| lin.forward(&Ctx::eval(t, &store), v[0])),
            )
        }),
        case!("layer_norm", |r| {
            let mut store = ParamStore::new();
            let ln = LayerNorm::new(&mut store, "ln", 6).unwrap();
            (
                vec![normal(r, &[3, 6])],
                boxed(move |t, v| ln.forward(&Ctx::eval(t, &store), v[0])),
            )
        }),
        case!("attention", |r| {
            let mask = attention_mask(1, 2, 3, 4, &[true, true, false, true], false);
            (
                vec![
                    normal(r, &[1, 2, 3, 4]),
                    normal(r, &[1, 2, 4, 4]),
                    normal(r, &[1, 2, 4, 4]),
                ],
                boxed(move |t, v| {
                    attention(
                        &Ctx::eval(t, &ParamStore::new()),
                        v[0],
                        v[1],
                        v[2],
                        Some(&mask),
                    )
                }),
            )
        }),
        case!("multi_head_attention_causal", |r| {
            let mut store = ParamStore::new();
            let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, r).unwrap();
            (
                vec![normal(r, &[2, 3, 4])],
                boxed(move |t, v| mha.forward(&Ctx::eval(t, &store), v[0], v[0], &[true; 6], true)),
            )
        }),
        case!("sstgcn", |r| {
            let mut store = ParamStore::new();
            let net = Sstgcn::new(&mut store, SstgcnConfig::default(), r).unwrap();
            (
                vec![normal(r, &[4, 3, 2]), positive(r, &[4, 3, 3], 0.0, 1.0)],
                boxed(move |t, v| net.forward(&Ctx::eval(t, &store), v[0], v[1])),
            )
        }),
        case!("adjacency_attention_dense", |r| {
            let mut store = ParamStore::new();
            let a = AdjacencyAttention::new(
                &mut store,
                3,
                4,
                AttentionMode::Dense,
                ScoreProjection::Learned,
                r,
            )
            .unwrap();
            (
                vec![positive(r, &[2, 3, 3], 0.0, 1.0)],
                boxed(move |t, v| a.apply(&Ctx::eval(t, &store), v[0])),
            )
        }),
        case!("gaussian_nll", |r| {
            let targets = normal(r, &[2, 3, 2]);
            let mask = vec![true, true, false, true, true, true];
            (
                vec![Array::from_fn(&[2, 3, 5], |_| r.gen_range(-0.8..0.8))],
                boxed(move |t, v| {
                    let store = ParamStore::new();
                    let ctx = Ctx::eval(t, &store);
                    Ok(gauss_head::nll_loss(&ctx, &project_raw(&ctx, v[0])?, &targets, &mask)?.sum)
                }),
            )
        }),
        case!("nce_loss", |r| (
            vec![normal(r, &[2, 4]), normal(r, &[2, 3, 5, 4])],
            boxed(|t, v| gauss_head::nce_loss(&Ctx::eval(t, &ParamStore::new()), v[0], v[1], 0.5))
        )),
        case!("l2_normalize", |r| (
            vec![normal(r, &[3, 4])],
            boxed(|t, v| gauss_head::l2_normalize(&Ctx::eval(t, &ParamStore::new()), v[0]))
        )),
    ]
}

/// Full training loss with respect to a random subset of model parameters.
/// Dropout is off so the loss is a deterministic function of them.
pub fn model_check(seed: u64, mode: AttentionMode, probes: usize) -> Result<f64> {
    let config = ModelConfig {
        attention_mode: mode,
        ..ModelConfig::default()
    };
    let mut model = Model::new(config, seed)?;
    let windows = super::gen::crowd_windows(4, seed, 0.05);
    let window = &windows[0];
    let loss_of = |m: &Model| -> Result<f64> {
        let tape = Tape::new();
        let l = batch_loss(m, &Ctx::eval(&tape, &m.params), &[window])?;
        let v = tape.value(l.total).item();
        Ok(v)
    };

    let tape = Tape::new();
    let loss = batch_loss(&model, &Ctx::eval(&tape, &model.params), &[window])?;
    let grads = tape.backward(loss.total)?;
    let by_param: std::collections::HashMap<usize, Array> = grads
        .param_grads()
        .map(|(id, g)| (id.index(), g.clone()))
        .collect();

    let ids: Vec<_> = model.params.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..probes {
        let id = ids[rng.gen_range(0..ids.len())];
        let j = rng.gen_range(0..model.params.value(id).len());
        let x0 = model.params.value(id).data()[j];
        model.params.value_mut(id).data_mut()[j] = x0 + STEP;
        let up = loss_of(&model)?;
        model.params.value_mut(id).data_mut()[j] = x0 - STEP;
        let down = loss_of(&model)?;
        model.params.value_mut(id).data_mut()[j] = x0;
        numeric.push((up - down) / (2.0 * STEP));
        analytic.push(by_param.get(&id.index()).map_or(0.0, |g| g.data()[j]));
    }
    Ok(rel_err(&analytic, &numeric))
}
