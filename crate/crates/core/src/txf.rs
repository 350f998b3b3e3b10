//! Transformer temporal extrapolator.
//!
//! Every filled slot is an independent sequence: attention runs along time
//! only, since social mixing already happened in the graph convolution. The
//! encoder reads the observed steps, the decoder emits one hidden state per
//! future step from the previous step's displacement under a causal mask.
//! Sequences are batched as `[B, T, D]`.

use rand::Rng;

use crate::diffarray::{Array, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub heads: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Normalise before each sub-layer instead of after the residual sum.
    pub norm_first: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            layers: 6,
            embed_dim: 8,
            ffn_dim: 32,
            dropout: 0.1,
            norm_first: false,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("layers and ffn_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Sinusoidal encoding of a timestamp: `sin` on even dimensions and `cos` on
/// odd ones, both of `t / 10000^(d/D)`.
pub fn positional_encoding(t: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|d| {
            let angle = t / 10000f64.powf(d as f64 / dim as f64);
            if d % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn encoding_table(timestamps: &[f64], dim: usize) -> Array {
    let data = timestamps
        .iter()
        .flat_map(|&t| positional_encoding(t, dim))
        .collect();
    Array::new(vec![timestamps.len(), dim], data).expect("table shape")
}

/// Boolean attention mask `[B, H, Tq, Tk]`: key `j` is visible to query `i`
/// when it is valid and, for causal masks, `j <= i`.
pub fn attention_mask(
    b: usize,
    h: usize,
    tq: usize,
    tk: usize,
    key_valid: &[bool],
    causal: bool,
) -> Vec<bool> {
    let mut m = Vec::with_capacity(b * h * tq * tk);
    for bi in 0..b {
        for _ in 0..h {
            for i in 0..tq {
                for j in 0..tk {
                    m.push(key_valid[bi * tk + j] && (!causal || j <= i));
                }
            }
        }
    }
    m
}

/// `softmax(Q·Kᵀ/√d_k)·V` over the last two axes. Masked keys get zero weight.
pub fn attention(ctx: &Ctx, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Result<Var> {
    let t = ctx.tape;
    let d_k = *t
        .shape(q)
        .last()
        .ok_or_else(|| Error::shape("attention", "rank 0 query"))?;
    let scores = t.mul_scalar(t.matmul(q, t.transpose(k)?)?, 1.0 / (d_k as f64).sqrt())?;
    let axis = t.shape(scores).len() - 1;
    let weights = t.softmax_masked(scores, axis, mask)?;
    t.matmul(weights, v)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            heads,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            out: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
        })
    }

    /// `[B, T, D] -> [B, H, T, D/H]`.
    fn split(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x);
        let r = ctx
            .tape
            .reshape(x, &[s[0], s[1], self.heads, s[2] / self.heads])?;
        ctx.tape.permute(r, &[0, 2, 1, 3])
    }

    /// Concatenated heads followed by the output map; `[B, Tq, D]`.
    pub fn forward(
        &self,
        ctx: &Ctx,
        xq: Var,
        xkv: Var,
        key_valid: &[bool],
        causal: bool,
    ) -> Result<Var> {
        let t = ctx.tape;
        let (sq, sk) = (t.shape(xq), t.shape(xkv));
        let (b, tq, tk, d) = (sq[0], sq[1], sk[1], sq[2]);
        let q = self.split(ctx, self.q.forward(ctx, xq)?)?;
        let k = self.split(ctx, self.k.forward(ctx, xkv)?)?;
        let v = self.split(ctx, self.v.forward(ctx, xkv)?)?;
        let mask = attention_mask(b, self.heads, tq, tk, key_valid, causal);
        let ctxv = attention(ctx, q, k, v, Some(&mask))?;
        let merged = t.reshape(t.permute(ctxv, &[0, 2, 1, 3])?, &[b, tq, d])?;
        self.out.forward(ctx, merged)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let h = ctx.tape.relu(self.up.forward(ctx, x)?)?;
        self.down.forward(ctx, h)
    }
}

/// Residual wrapper around one sub-layer, in post- or pre-norm order.
fn sublayer(
    ctx: &Ctx,
    x: Var,
    norm: &LayerNorm,
    norm_first: bool,
    f: impl FnOnce(Var) -> Result<Var>,
) -> Result<Var> {
    let t = ctx.tape;
    if norm_first {
        let y = ctx.dropout(f(norm.forward(ctx, x)?)?)?;
        t.add(x, y)
    } else {
        let y = ctx.dropout(f(x)?)?;
        norm.forward(ctx, t.add(x, y)?)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    ffn: FeedForward,
    ln1: LayerNorm,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: FeedForward,
    ln1: LayerNorm,
    ln2: LayerNorm,
    ln3: LayerNorm,
}

/// Encoder output together with the frame validity it was computed under.
#[derive(Clone, Debug)]
pub struct Memory {
    /// `[B, T_obs, D]`, zero at invalid frames.
    pub hidden: Var,
    /// `[B × T_obs]` row-major.
    pub valid: Vec<bool>,
}

pub enum DecodeMode<'a> {
    /// Ground-truth displacements `[B, T_pred, 2]`; step `j` is conditioned on
    /// step `j - 1` and the first step on a zero displacement.
    TeacherForced(&'a Array),
    /// Each step is conditioned on the previous step's predicted mean, read
    /// from the hidden states `[B, j, D]` as displacements `[B, j, 2]`.
    Autoregressive(&'a dyn Fn(&Ctx, Var) -> Result<Array>),
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    input: Linear,
    dec_input: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    final_enc: Option<LayerNorm>,
    final_dec: Option<LayerNorm>,
}

impl Transformer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: TransformerConfig,
        in_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (d, h, f) = (config.embed_dim, config.heads, config.ffn_dim);
        let input = Linear::new(store, "txf.input", in_features, d, true, rng)?;
        let dec_input = Linear::new(store, "txf.dec_input", 2, d, true, rng)?;
        let mut encoder = Vec::new();
        for l in 0..config.layers {
            let p = format!("txf.enc.{l}");
            encoder.push(EncoderLayer {
                attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, h, rng)?,
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, f, rng)?,
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
            });
        }
        let mut decoder = Vec::new();
        for l in 0..config.layers {
            let p = format!("txf.dec.{l}");
            decoder.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self"), d, h, rng)?,
                cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross"), d, h, rng)?,
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, f, rng)?,
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                ln3: LayerNorm::new(store, &format!("{p}.ln3"), d)?,
            });
        }
        // Pre-norm stacks leave their residual stream unnormalised.
        let (final_enc, final_dec) = if config.norm_first {
            (
                Some(LayerNorm::new(store, "txf.enc.final", d)?),
                Some(LayerNorm::new(store, "txf.dec.final", d)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            input,
            dec_input,
            encoder,
            decoder,
            final_enc,
            final_dec,
        })
    }

    /// Encodes `features: [B, T_obs, F]` observed at `timestamps`. Invalid
    /// frames are zeroed before the first layer and masked as attention keys,
    /// so the memory at valid frames never depends on them.
    pub fn encode(
        &self,
        ctx: &Ctx,
        features: Var,
        timestamps: &[f64],
        valid: &[bool],
    ) -> Result<Memory> {
        let t = ctx.tape;
        let s = t.shape(features);
        if s.len() != 3 || s[1] != timestamps.len() || valid.len() != s[0] * s[1] {
            return Err(Error::shape(
                "encode",
                format!("features {s:?}, {} timestamps", timestamps.len()),
            ));
        }
        let (b, t_obs) = (s[0], s[1]);
        if let Some(bi) = (0..b).find(|&bi| !valid[bi * t_obs..][..t_obs].iter().any(|&v| v)) {
            return Err(Error::invalid(format!("sequence {bi} has no valid frame")));
        }
        let keep = t.constant(mask_array(valid, b, t_obs));
        let pe = t.constant(encoding_table(timestamps, self.config.embed_dim));
        let mut x = t.mul(t.add(self.input.forward(ctx, features)?, pe)?, keep)?;
        let nf = self.config.norm_first;
        for layer in &self.encoder {
            x = sublayer(ctx, x, &layer.ln1, nf, |y| {
                layer.attn.forward(ctx, y, y, valid, false)
            })?;
            x = sublayer(ctx, x, &layer.ln2, nf, |y| layer.ffn.forward(ctx, y))?;
        }
        if let Some(ln) = &self.final_enc {
            x = ln.forward(ctx, x)?;
        }
        Ok(Memory {
            hidden: t.mul(x, keep)?,
            valid: valid.to_vec(),
        })
    }

    /// One decoder pass over explicit step inputs `[B, J, 2]`; `[B, J, D]`.
    pub fn decode_inputs(
        &self,
        ctx: &Ctx,
        memory: &Memory,
        inputs: Var,
        timestamps: &[f64],
    ) -> Result<Var> {
        let t = ctx.tape;
        let s = t.shape(inputs);
        if s.len() != 3 || s[2] != 2 || s[1] != timestamps.len() {
            return Err(Error::shape(
                "decode",
                format!("inputs {s:?}, {} timestamps", timestamps.len()),
            ));
        }
        let all = vec![true; s[0] * s[1]];
        let pe = t.constant(encoding_table(timestamps, self.config.embed_dim));
        let mut x = t.add(self.dec_input.forward(ctx, inputs)?, pe)?;
        let nf = self.config.norm_first;
        for layer in &self.decoder {
            x = sublayer(ctx, x, &layer.ln1, nf, |y| {
                layer.self_attn.forward(ctx, y, y, &all, true)
            })?;
            x = sublayer(ctx, x, &layer.ln2, nf, |y| {
                layer
                    .cross_attn
                    .forward(ctx, y, memory.hidden, &memory.valid, false)
            })?;
            x = sublayer(ctx, x, &layer.ln3, nf, |y| layer.ffn.forward(ctx, y))?;
        }
        if let Some(ln) = &self.final_dec {
            x = ln.forward(ctx, x)?;
        }
        Ok(x)
    }

    /// Hidden states for `T_pred = timestamps.len()` future steps.
    pub fn decode(
        &self,
        ctx: &Ctx,
        memory: &Memory,
        timestamps: &[f64],
        mode: DecodeMode<'_>,
    ) -> Result<Var> {
        let t = ctx.tape;
        let b = t.shape(memory.hidden)[0];
        let t_pred = timestamps.len();
        match mode {
            DecodeMode::TeacherForced(targets) => {
                if targets.shape() != [b, t_pred, 2] {
                    return Err(Error::shape(
                        "decode",
                        format!(
                            "teacher-forced targets {:?}, expected [{b}, {t_pred}, 2]",
                            targets.shape()
                        ),
                    ));
                }
                let mut inputs = Array::zeros(&[b, t_pred, 2]);
                for bi in 0..b {
                    for j in 1..t_pred {
                        for c in 0..2 {
                            inputs.set(&[bi, j, c], targets.get(&[bi, j - 1, c]));
                        }
                    }
                }
                self.decode_inputs(ctx, memory, t.constant(inputs), timestamps)
            }
            DecodeMode::Autoregressive(readout) => {
                let mut steps: Vec<[f64; 2]> = vec![[0.0, 0.0]; b];
                let mut inputs: Vec<Vec<[f64; 2]>> = vec![Vec::with_capacity(t_pred); b];
                let mut hidden = None;
                for j in 0..t_pred {
                    for bi in 0..b {
                        inputs[bi].push(steps[bi]);
                    }
                    let data = inputs
                        .iter()
                        .flat_map(|row| row.iter().flat_map(|p| *p))
                        .collect();
                    let x = t.constant(Array::new(vec![b, j + 1, 2], data)?);
                    let h = self.decode_inputs(ctx, memory, x, &timestamps[..=j])?;
                    if j + 1 < t_pred {
                        let means = readout(ctx, h)?;
                        for (bi, step) in steps.iter_mut().enumerate() {
                            *step = [means.get(&[bi, j, 0]), means.get(&[bi, j, 1])];
                        }
                    }
                    hidden = Some(h);
                }
                hidden.ok_or_else(|| Error::invalid("decode needs T_pred >= 1"))
            }
        }
    }
}

/// `[B, T, 1]` array of 1.0 for valid frames and 0.0 otherwise.
fn mask_array(valid: &[bool], b: usize, t: usize) -> Array {
    Array::new(
        vec![b, t, 1],
        valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )
    .expect("mask shape")
}
