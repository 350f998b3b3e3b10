//! Mini-batch training with Adam, validation-based model selection and a
//! reproducible run manifest.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::eval;
use super::optim::{clip_grad_norm, Adam};
use crate::diffarray::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::gauss_head;
use crate::nn::{Ctx, Dropout};
use crate::pipeline::{derive_seed, future_displacements, Model};
use crate::sstg::TrajectoryWindow;

/// Seed streams derived from the run seed.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;
const EVAL_STREAM: u64 = 0x4556_414c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    /// NLL per valid step.
    pub nll: f64,
    /// Contrastive term before weighting; `None` when no window in the batch
    /// has two agents with complete futures.
    pub nce: Option<f64>,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_nll: f64,
    pub mean_total: f64,
    pub val_ade: Option<f64>,
    pub val_fde: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Every configuration key and value.
    pub config: Vec<(String, String)>,
    /// Content hashes of the input files, when known.
    pub datasets: Vec<(String, String)>,
    /// Hash of the training and validation windows.
    pub data_fingerprint: String,
    pub train_windows: usize,
    pub val_windows: usize,
    pub parameter_count: usize,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept; `None` keeps the last.
    pub best_epoch: Option<usize>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    /// Equality ignoring wall-clock time.
    pub fn same_run(&self, other: &Self) -> bool {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        } == Self {
            wall_clock_secs: 0.0,
            ..other.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// SHA-256 of arbitrary bytes, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Order-sensitive hash of window contents (frames, ids, classes and the exact
/// bits of every coordinate).
pub fn fingerprint(sets: &[&[TrajectoryWindow]]) -> String {
    let mut h = Sha256::new();
    for set in sets {
        h.update((set.len() as u64).to_le_bytes());
        for w in *set {
            h.update((w.frames.len() as u64).to_le_bytes());
            for f in &w.frames {
                h.update(f.to_le_bytes());
            }
            h.update((w.t_pred as u64).to_le_bytes());
            for tr in &w.tracks {
                h.update(tr.id.to_le_bytes());
                h.update([tr.class.map_or(0, |c| c as u8 + 1)]);
                for p in tr.observed.iter().chain(&tr.future) {
                    match p {
                        Some(p) => {
                            h.update([1]);
                            h.update(p[0].to_bits().to_le_bytes());
                            h.update(p[1].to_bits().to_le_bytes());
                        }
                        None => h.update([0]),
                    }
                }
            }
        }
    }
    hex::encode(h.finalize())
}

/// Loss of one batch on `tape`: NLL averaged over every valid step in the
/// batch, the contrastive term averaged over every sample group, and their
/// `nll + λ·nce` combination.
pub struct BatchLoss {
    pub nll: Var,
    pub nce: Option<Var>,
    pub total: Var,
}

pub fn batch_loss(model: &Model, ctx: &Ctx, batch: &[&TrajectoryWindow]) -> Result<BatchLoss> {
    let t = ctx.tape;
    let mut nll_sums = Vec::new();
    let mut count = 0usize;
    let mut nce_terms = Vec::new();
    let mut groups = 0usize;
    for w in batch {
        let terms = model.loss(ctx, w)?;
        nll_sums.push(terms.nll.sum);
        count += terms.nll.count;
        if let Some((v, n)) = terms.nce {
            nce_terms.push(t.mul_scalar(v, n as f64)?);
            groups += n;
        }
    }
    let sum = nll_sums[1..]
        .iter()
        .try_fold(nll_sums[0], |acc, &s| t.add(acc, s))?;
    let nll = t.mul_scalar(sum, 1.0 / count as f64)?;
    let nce = match nce_terms.split_first() {
        Some((first, rest)) => {
            let s = rest.iter().try_fold(*first, |acc, &v| t.add(acc, v))?;
            Some(t.mul_scalar(s, 1.0 / groups as f64)?)
        }
        None => None,
    };
    let total = gauss_head::total_loss(ctx, nll, nce, model.config.nce.lambda)?;
    Ok(BatchLoss { nll, nce, total })
}

fn trainable(model: &Model, w: &TrajectoryWindow) -> bool {
    w.t_obs() == model.config.t_obs
        && future_displacements(w, model.config.t_pred).is_ok_and(|(_, any)| any)
}

/// Trains in place. Windows without usable ground truth are skipped; the
/// parameters of the epoch with the lowest validation ADE are kept.
pub fn train(
    model: &mut Model,
    train: &[TrajectoryWindow],
    val: &[TrajectoryWindow],
    cfg: &TrainConfig,
) -> Result<RunManifest> {
    train_with(model, train, val, cfg, |_| {})
}

/// [`train`] with a callback after every optimiser step.
pub fn train_with(
    model: &mut Model,
    train: &[TrajectoryWindow],
    val: &[TrajectoryWindow],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<RunManifest> {
    cfg.validate()?;
    let started = Instant::now();
    let usable: Vec<&TrajectoryWindow> = train.iter().filter(|w| trainable(model, w)).collect();
    if usable.is_empty() {
        return Err(Error::invalid(
            "no training window has ground truth for the configured horizon",
        ));
    }
    if usable.len() < train.len() {
        log::warn!(
            "{} of {} training windows skipped (no usable future)",
            train.len() - usable.len(),
            train.len()
        );
    }
    let val: Vec<TrajectoryWindow> = val
        .iter()
        .filter(|w| trainable(model, w))
        .cloned()
        .collect();
    let mut adam = Adam::new(&model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut manifest = RunManifest {
        config: Vec::new(),
        datasets: Vec::new(),
        data_fingerprint: fingerprint(&[train, &val]),
        train_windows: usable.len(),
        val_windows: val.len(),
        parameter_count: model.parameter_count(),
        steps: Vec::new(),
        epochs: Vec::new(),
        best_epoch: None,
        wall_clock_secs: 0.0,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut step = 0usize;
    let total_steps = cfg.epochs * usable.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed ^ SHUFFLE_STREAM,
            epoch as u64,
        )));
        let (mut nll_acc, mut total_acc, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrajectoryWindow> = chunk.iter().map(|&i| usable[i]).collect();
            adam.lr = scheduled_lr(cfg, step, total_steps);
            let log = optimizer_step(model, &mut adam, &batch, cfg, step, epoch)?;
            nll_acc += log.nll;
            total_acc += log.total;
            batches += 1;
            on_step(&log);
            manifest.steps.push(log);
            step += 1;
        }
        let mut entry = EpochLog {
            epoch,
            mean_nll: nll_acc / batches as f64,
            mean_total: total_acc / batches as f64,
            val_ade: None,
            val_fde: None,
        };
        let due =
            cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        if due && !val.is_empty() {
            let f = eval::forecast(
                model,
                &val,
                1,
                derive_seed(cfg.seed ^ EVAL_STREAM, epoch as u64),
            )?;
            let (ade, fde) = eval::mean_errors(&f)?;
            entry.val_ade = Some(ade);
            entry.val_fde = Some(fde);
            if best.as_ref().is_none_or(|(b, _)| ade < *b) {
                best = Some((ade, model.params.clone()));
                manifest.best_epoch = Some(epoch);
            }
        }
        log::info!(
            "epoch {epoch}: nll {:.4} total {:.4}{}",
            entry.mean_nll,
            entry.mean_total,
            entry
                .val_ade
                .map(|a| format!(
                    " val ade {a:.4} fde {:.4}",
                    entry.val_fde.unwrap_or(f64::NAN)
                ))
                .unwrap_or_default()
        );
        manifest.epochs.push(entry);
    }
    if let Some((_, params)) = best {
        model.params.copy_values_from(&params)?;
    }
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(manifest)
}

/// Cosine annealing from `lr` to `lr · lr_final_fraction`.
pub fn scheduled_lr(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    if cfg.lr_final_fraction == 1.0 || total_steps <= 1 {
        return cfg.lr;
    }
    let progress = step as f64 / (total_steps - 1) as f64;
    let f = cfg.lr_final_fraction
        + (1.0 - cfg.lr_final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr * f
}

fn optimizer_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&TrajectoryWindow],
    cfg: &TrainConfig,
    step: usize,
    epoch: usize,
) -> Result<StepLog> {
    let tape = Tape::new();
    let dropout = Dropout::new(
        model.config.transformer.dropout,
        derive_seed(cfg.seed ^ DROPOUT_STREAM, step as u64),
    );
    let (log, grads) = {
        let ctx = Ctx {
            tape: &tape,
            params: &model.params,
            dropout: Some(&dropout),
        };
        let loss = batch_loss(model, &ctx, batch)?;
        let total = tape.value(loss.total).item();
        let nll = tape.value(loss.nll).item();
        let nce = loss.nce.map(|v| tape.value(v).item());
        if !total.is_finite() {
            return Err(Error::Divergence { step });
        }
        let grads = tape.backward(loss.total)?;
        let log = StepLog {
            step,
            epoch,
            nll,
            nce,
            total,
            grad_norm: 0.0,
        };
        (log, grads)
    };
    model.params.zero_grad();
    model.params.accumulate(&grads);
    let grad_norm = match cfg.clip_norm {
        Some(c) => clip_grad_norm(&mut model.params, c),
        None => super::optim::grad_norm(&model.params),
    };
    if !grad_norm.is_finite() {
        return Err(Error::Divergence { step });
    }
    adam.step(&mut model.params);
    Ok(StepLog { grad_norm, ..log })
}
