//! Bivariate Gaussian output head, the prediction and contrastive losses, and
//! trajectory sampling.
//!
//! The head describes each future step's displacement (not its absolute
//! position): positions are recovered by integrating displacements from the
//! last observed position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffarray::{Array, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::sstg::Point;

pub const PARAMS_PER_STEP: usize = 5;
/// `tanh` of this is the largest correlation sampled; 1 − ρ² ≈ 1e-13.
pub const RHO_RAW_LIMIT: f64 = 15.0;
pub const LOG_SIGMA_LIMIT: f64 = 100.0;

/// One step's displacement distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bivariate {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub rho: f64,
}

impl Bivariate {
    pub fn new(mu: [f64; 2], sigma: [f64; 2], rho: f64) -> Result<Self> {
        let b = Self { mu, sigma, rho };
        if !mu.iter().chain(&sigma).all(|v| v.is_finite()) {
            return Err(Error::domain(
                "bivariate",
                format!("non-finite μ = {mu:?} or σ = {sigma:?}"),
            ));
        }
        if !b.is_positive_definite() {
            return Err(Error::domain(
                "bivariate",
                format!("σ = {sigma:?}, ρ = {rho} is not positive definite"),
            ));
        }
        Ok(b)
    }

    /// `[[σx², ρσxσy], [ρσxσy, σy²]]`.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let [sx, sy] = self.sigma;
        let c = self.rho * sx * sy;
        [[sx * sx, c], [c, sy * sy]]
    }

    pub fn is_positive_definite(&self) -> bool {
        let [[a, b], [_, d]] = self.covariance();
        self.sigma[0] > 0.0
            && self.sigma[1] > 0.0
            && self.rho.abs() < 1.0
            && a > 0.0
            && a * d - b * b > 0.0
    }

    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        let [sx, sy] = self.sigma;
        let dx = (x[0] - self.mu[0]) / sx;
        let dy = (x[1] - self.mu[1]) / sy;
        let one_m = 1.0 - self.rho * self.rho;
        let z = dx * dx + dy * dy - 2.0 * self.rho * dx * dy;
        -(2.0 * std::f64::consts::PI).ln()
            - sx.ln()
            - sy.ln()
            - 0.5 * one_m.ln()
            - z / (2.0 * one_m)
    }

    /// `μ + L·z` with `L` the lower Cholesky factor of the covariance.
    pub fn transform(&self, z: [f64; 2]) -> [f64; 2] {
        let [sx, sy] = self.sigma;
        let l21 = self.rho * sy;
        let l22 = sy * (1.0 - self.rho * self.rho).sqrt();
        [self.mu[0] + sx * z[0], self.mu[1] + l21 * z[0] + l22 * z[1]]
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 2] {
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        self.transform([z0, z1])
    }
}

/// Differentiable Gaussian parameters for a batch of sequences.
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    /// `[B, T, 2]` mean displacement.
    pub mu: Var,
    /// `[B, T, 2]` unconstrained log standard deviation.
    pub log_sigma: Var,
    /// `[B, T, 1]` unconstrained correlation (`ρ = tanh(raw)`).
    pub rho_raw: Var,
}

impl FieldVars {
    pub fn batch(&self, ctx: &Ctx) -> (usize, usize) {
        let s = ctx.tape.shape(self.mu);
        (s[0], s[1])
    }

    /// Concrete distributions indexed `[b][t]`. Raw values are clamped so
    /// σ stays normal and |ρ| stays below 1 in floating point.
    pub fn to_field(&self, ctx: &Ctx) -> Result<Vec<Vec<Bivariate>>> {
        let t = ctx.tape;
        let (mu, ls, rr) = (
            t.value(self.mu),
            t.value(self.log_sigma),
            t.value(self.rho_raw),
        );
        let (b, steps) = self.batch(ctx);
        (0..b)
            .map(|bi| {
                (0..steps)
                    .map(|j| {
                        Bivariate::new(
                            [mu.get(&[bi, j, 0]), mu.get(&[bi, j, 1])],
                            [
                                ls.get(&[bi, j, 0])
                                    .clamp(-LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT)
                                    .exp(),
                                ls.get(&[bi, j, 1])
                                    .clamp(-LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT)
                                    .exp(),
                            ],
                            rr.get(&[bi, j, 0])
                                .clamp(-RHO_RAW_LIMIT, RHO_RAW_LIMIT)
                                .tanh(),
                        )
                    })
                    .collect()
            })
            .collect()
    }
}

/// Linear map from decoder hidden states to the five Gaussian parameters.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    proj: Linear,
}

impl GaussianHead {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, "head.proj", dim, PARAMS_PER_STEP, true, rng)?,
        })
    }

    pub fn project(&self, ctx: &Ctx, hidden: Var) -> Result<FieldVars> {
        let raw = self.proj.forward(ctx, hidden)?;
        project_raw(ctx, raw)
    }
}

/// Splits raw `[B, T, 5]` outputs into (μx, μy), (log σx, log σy), ρ-raw.
pub fn project_raw(ctx: &Ctx, raw: Var) -> Result<FieldVars> {
    let t = ctx.tape;
    let s = t.shape(raw);
    if s.len() != 3 || s[2] != PARAMS_PER_STEP {
        return Err(Error::shape(
            "project",
            format!("{s:?}, expected [B, T, 5]"),
        ));
    }
    Ok(FieldVars {
        mu: t.narrow(raw, 2, 0, 2)?,
        log_sigma: t.narrow(raw, 2, 2, 2)?,
        rho_raw: t.narrow(raw, 2, 4, 1)?,
    })
}

/// Summed negative log-likelihood over valid steps and the number of them.
#[derive(Clone, Copy, Debug)]
pub struct NllTerm {
    pub sum: Var,
    pub count: usize,
}

/// `−Σ log N(target | μ, σ, ρ)` over the steps where `mask` is true.
/// `targets` is `[B, T, 2]`, `mask` is `[B × T]` row-major.
pub fn nll_loss(ctx: &Ctx, field: &FieldVars, targets: &Array, mask: &[bool]) -> Result<NllTerm> {
    let t = ctx.tape;
    let (b, steps) = field.batch(ctx);
    if targets.shape() != [b, steps, 2] || mask.len() != b * steps {
        return Err(Error::shape(
            "nll_loss",
            format!("targets {:?} for [{b}, {steps}]", targets.shape()),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::invalid("nll_loss needs at least one valid step"));
    }
    let tgt = t.constant(targets.clone());
    let inv_sigma = t.exp(t.neg(field.log_sigma)?)?;
    let d = t.mul(t.sub(tgt, field.mu)?, inv_sigma)?;
    let dx = t.narrow(d, 2, 0, 1)?;
    let dy = t.narrow(d, 2, 1, 1)?;
    let r = field.rho_raw;
    let rho = t.tanh(r)?;
    // 1 − tanh²(r) = 1 / cosh²(r), evaluated without cancellation.
    let cosh = t.mul_scalar(t.add(t.exp(r)?, t.exp(t.neg(r)?)?)?, 0.5)?;
    let inv_one_m = t.mul(cosh, cosh)?;
    let log_one_m = t.mul_scalar(t.log(cosh)?, -2.0)?;
    let cross = t.mul_scalar(t.mul(rho, t.mul(dx, dy)?)?, 2.0)?;
    let z = t.sub(t.add(t.mul(dx, dx)?, t.mul(dy, dy)?)?, cross)?;
    let quad = t.mul_scalar(t.mul(z, inv_one_m)?, 0.5)?;
    let log_sig = t.sum_axis(field.log_sigma, 2, true)?;
    let nll = t.add(
        t.add_scalar(
            t.add(log_sig, t.mul_scalar(log_one_m, 0.5)?)?,
            (2.0 * std::f64::consts::PI).ln(),
        )?,
        quad,
    )?;
    let m = Array::new(
        vec![b, steps, 1],
        mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )?;
    let sum = t.sum(t.mul(nll, t.constant(m))?)?;
    Ok(NllTerm { sum, count })
}

/// InfoNCE over `query: [Q, D]` and `keys: [Q, S, M, D]`, where key 0 of every
/// `(q, s)` group is the positive and the rest are negatives. Returns the
/// mean over the `Q × S` groups of `−log softmax(q·k / τ)[0]`.
pub fn nce_loss(ctx: &Ctx, query: Var, keys: Var, temperature: f64) -> Result<Var> {
    let t = ctx.tape;
    let (qs, ks) = (t.shape(query), t.shape(keys));
    if qs.len() != 2 || ks.len() != 4 || ks[0] != qs[0] || ks[3] != qs[1] {
        return Err(Error::shape(
            "nce_loss",
            format!("query {qs:?}, keys {ks:?}"),
        ));
    }
    if ks[2] < 2 {
        return Err(Error::invalid("nce_loss needs at least one negative key"));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "nce temperature {temperature} must be positive"
        )));
    }
    let (q, s, m, d) = (ks[0], ks[1], ks[2], ks[3]);
    let flat = t.reshape(keys, &[q, s * m, d])?;
    let col = t.reshape(query, &[q, d, 1])?;
    let scores = t.mul_scalar(
        t.reshape(t.matmul(flat, col)?, &[q, s, m])?,
        1.0 / temperature,
    )?;
    // The shift is a constant; log-sum-exp is invariant to it, so the gradient
    // is unaffected.
    let sv = t.value(scores);
    let maxes = Array::new(
        vec![q, s, 1],
        sv.data()
            .chunks(m)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    )?;
    let shift = t.constant(maxes);
    let lse = t.add(
        t.log(t.sum_axis(t.exp(t.sub(scores, shift)?)?, 2, true)?)?,
        shift,
    )?;
    let pos = t.narrow(scores, 2, 0, 1)?;
    t.mean(t.sub(lse, pos)?)
}

/// `nll + λ·nce`.
pub fn total_loss(ctx: &Ctx, nll: Var, nce: Option<Var>, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!(
            "nce_lambda {lambda} must be non-negative"
        )));
    }
    match nce {
        Some(n) if lambda > 0.0 => ctx.tape.add(nll, ctx.tape.mul_scalar(n, lambda)?),
        _ => Ok(nll),
    }
}

/// Embeddings for the contrastive loss: the observed history (query) and
/// candidate future points (keys), both unit-normalised.
#[derive(Clone, Debug)]
pub struct NceEmbedder {
    hist: Linear,
    point_in: Linear,
    point_out: Linear,
}

impl NceEmbedder {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            hist: Linear::new(store, "nce.hist", dim, dim, true, rng)?,
            point_in: Linear::new(store, "nce.point_in", 2, dim, true, rng)?,
            point_out: Linear::new(store, "nce.point_out", dim, dim, true, rng)?,
        })
    }

    /// `pooled: [Q, D]` history summaries.
    pub fn history(&self, ctx: &Ctx, pooled: Var) -> Result<Var> {
        l2_normalize(ctx, self.hist.forward(ctx, pooled)?)
    }

    /// `points: [.., 2]` relative positions.
    pub fn points(&self, ctx: &Ctx, points: Var) -> Result<Var> {
        let h = ctx.tape.relu(self.point_in.forward(ctx, points)?)?;
        l2_normalize(ctx, self.point_out.forward(ctx, h)?)
    }
}

/// Unit-normalises the last axis.
pub fn l2_normalize(ctx: &Ctx, x: Var) -> Result<Var> {
    let t = ctx.tape;
    let axis = t.shape(x).len() - 1;
    let norm = t.sqrt(t.add_scalar(t.sum_axis(t.mul(x, x)?, axis, true)?, 1e-12)?)?;
    t.div(x, norm)
}

/// Draws `n` trajectories per agent. `field[a][j]` is agent `a`'s step-`j`
/// displacement distribution and `last[a]` its last observed position.
/// Returns positions indexed `[agent][sample][step]`.
pub fn sample_trajectories(
    field: &[Vec<Bivariate>],
    last: &[Point],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<Point>>>> {
    if n == 0 {
        return Err(Error::invalid("at least one sample is required"));
    }
    if field.len() != last.len() {
        return Err(Error::shape(
            "sample_trajectories",
            format!("{} fields, {} origins", field.len(), last.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(field
        .iter()
        .zip(last)
        .map(|(steps, &origin)| {
            (0..n)
                .map(|_| {
                    let mut p = origin;
                    steps
                        .iter()
                        .map(|g| {
                            let d = g.sample(&mut rng);
                            p = [p[0] + d[0], p[1] + d[1]];
                            p
                        })
                        .collect()
                })
                .collect()
        })
        .collect())
}

/// The trajectory obtained by integrating the mean displacements.
pub fn mean_trajectory(steps: &[Bivariate], origin: Point) -> Vec<Point> {
    let mut p = origin;
    steps
        .iter()
        .map(|g| {
            p = [p[0] + g.mu[0], p[1] + g.mu[1]];
            p
        })
        .collect()
}
