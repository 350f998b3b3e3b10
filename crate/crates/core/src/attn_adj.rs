//! Attention-aware adjacency.
//!
//! Each adjacency row is projected to a query and a key; a row-wise softmax of
//! their scaled dot products gives an attention map over slots, which either
//! reweights the adjacency (`Dense`) or, thresholded at 0.5, selects at most
//! one neighbour per row (`Sparse`).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::diffarray::{Array, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Ctx;

pub const SPARSE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionMode {
    #[default]
    Off,
    Dense,
    Sparse,
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "dense" => Ok(Self::Dense),
            "sparse" => Ok(Self::Sparse),
            _ => Err(Error::Config(format!(
                "unknown attention mode `{s}` (off|dense|sparse)"
            ))),
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::Dense => "dense",
            Self::Sparse => "sparse",
        })
    }
}

/// Source of the query and key vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScoreProjection {
    /// `Q = A·Wq`, `K = A·Wk` with learned `[K, d_k]` projections.
    #[default]
    Learned,
    /// The adjacency rows themselves (`d_k = K`).
    Raw,
}

#[derive(Clone, Debug)]
pub struct AdjacencyAttention {
    pub mode: AttentionMode,
    pub projection: ScoreProjection,
    pub slots: usize,
    pub d_k: usize,
    wq: Option<ParamId>,
    wk: Option<ParamId>,
}

impl AdjacencyAttention {
    /// Projections are registered only when the mode uses them.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        slots: usize,
        d_k: usize,
        mode: AttentionMode,
        projection: ScoreProjection,
        rng: &mut R,
    ) -> Result<Self> {
        let learned = mode != AttentionMode::Off && projection == ScoreProjection::Learned;
        let (wq, wk) = if learned {
            (
                Some(store.register_uniform("attn_adj.wq", &[slots, d_k], slots, rng)?),
                Some(store.register_uniform("attn_adj.wk", &[slots, d_k], slots, rng)?),
            )
        } else {
            (None, None)
        };
        let d_k = if projection == ScoreProjection::Raw {
            slots
        } else {
            d_k
        };
        Ok(Self {
            mode,
            projection,
            slots,
            d_k,
            wq,
            wk,
        })
    }

    /// Row-wise softmax of `Q·Kᵀ/√d_k` per frame, `[T, K, K]`.
    pub fn attention_weights(&self, ctx: &Ctx, a: Var) -> Result<Var> {
        let t = ctx.tape;
        let shape = t.shape(a);
        if shape.len() != 3 || shape[1] != self.slots || shape[2] != self.slots {
            return Err(Error::shape(
                "attention_weights",
                format!("{shape:?} for K = {}", self.slots),
            ));
        }
        let (q, k) = match (self.wq, self.wk) {
            (Some(wq), Some(wk)) => (t.matmul(a, ctx.param(wq))?, t.matmul(a, ctx.param(wk))?),
            _ => (a, a),
        };
        let scores = t.matmul(q, t.transpose(k)?)?;
        let scaled = t.mul_scalar(scores, 1.0 / (self.d_k as f64).sqrt())?;
        t.softmax(scaled, 2)
    }

    /// The adjacency after attention processing according to `mode`.
    pub fn apply(&self, ctx: &Ctx, a: Var) -> Result<Var> {
        match self.mode {
            AttentionMode::Off => Ok(a),
            AttentionMode::Dense => {
                let attn = self.attention_weights(ctx, a)?;
                ctx.tape.mul(attn, a)
            }
            AttentionMode::Sparse => {
                let attn = self.attention_weights(ctx, a)?;
                let mask = sparse_mask(&ctx.tape.value(attn));
                ctx.tape.mul(ctx.tape.constant(mask), a)
            }
        }
    }

    /// `attn ⊙ A` with a caller-supplied attention map.
    pub fn apply_with(&self, ctx: &Ctx, a: Var, attn: Var) -> Result<Var> {
        ctx.tape.mul(attn, a)
    }
}

/// Indicator of `attn > 0.5`, strictly. The result carries no gradient.
pub fn sparse_mask(attn: &Array) -> Array {
    attn.map(|v| if v > SPARSE_THRESHOLD { 1.0 } else { 0.0 })
}
