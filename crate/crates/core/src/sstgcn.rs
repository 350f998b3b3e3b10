//! Spatio-temporal graph convolution over pseudo-images.
//!
//! A layer first transforms node features with a 1×1 convolution and
//! aggregates them over neighbours by the per-frame product `A_t · X_t`, then
//! mixes each slot's features over time with a 3×1 convolution and adds a
//! residual. The residual is a learned 1×1 convolution on the first layer,
//! where the width grows from 2 to 5 channels, and the identity afterwards.

use std::str::FromStr;

use rand::Rng;

use crate::diffarray::{Array, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Ctx;

pub const IN_CHANNELS: usize = 2;
pub const OUT_CHANNELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    None,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!(
                "unknown activation `{s}` (tanh|none)"
            ))),
        }
    }
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tanh => "tanh",
            Self::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SstgcnConfig {
    pub layers: usize,
    pub no_spatial: bool,
    pub no_temporal: bool,
    pub activation: Activation,
}

impl Default for SstgcnConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            no_spatial: false,
            no_temporal: false,
            activation: Activation::Tanh,
        }
    }
}

impl SstgcnConfig {
    pub fn temporal_kernel(&self) -> usize {
        if self.no_temporal {
            1
        } else {
            3
        }
    }
}

#[derive(Clone, Debug)]
pub struct SstgcnLayer {
    pub cin: usize,
    pub cout: usize,
    pub ws: ParamId,
    pub bs: ParamId,
    pub wt: ParamId,
    pub bt: ParamId,
    pub wr: Option<ParamId>,
    pub temporal_h: usize,
}

impl SstgcnLayer {
    fn new<R: Rng>(
        store: &mut ParamStore,
        index: usize,
        cin: usize,
        cout: usize,
        temporal_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let p = format!("sstgcn.{index}");
        let ws = store.register_uniform(format!("{p}.ws"), &[1, 1, cin, cout], cin, rng)?;
        let bs = store.register_zeros(format!("{p}.bs"), &[cout])?;
        let wt = store.register_uniform(
            format!("{p}.wt"),
            &[temporal_h, 1, cout, cout],
            temporal_h * cout,
            rng,
        )?;
        let bt = store.register_zeros(format!("{p}.bt"), &[cout])?;
        let wr = if cin != cout {
            Some(store.register_uniform(format!("{p}.wr"), &[1, 1, cin, cout], cin, rng)?)
        } else {
            None
        };
        Ok(Self {
            cin,
            cout,
            ws,
            bs,
            wt,
            bt,
            wr,
            temporal_h,
        })
    }

    /// `Z_t = A_t · (X_t W_s + b_s)` for every frame; `[T, K, Cout]`.
    pub fn spatial_conv(&self, ctx: &Ctx, v: Var, a: Var) -> Result<Var> {
        let t = ctx.tape;
        let x = t.add(t.conv2d(v, ctx.param(self.ws), 0)?, ctx.param(self.bs))?;
        t.matmul(a, x)
    }

    /// `conv3x1(Z) + b_t + Res(V_in)`, zero-padded in time.
    pub fn temporal_conv(&self, ctx: &Ctx, z: Var, v_in: Var) -> Result<Var> {
        let t = ctx.tape;
        let pad = (self.temporal_h - 1) / 2;
        let y = t.add(t.conv2d(z, ctx.param(self.wt), pad)?, ctx.param(self.bt))?;
        let res = match self.wr {
            Some(wr) => t.conv2d(v_in, ctx.param(wr), 0)?,
            None => v_in,
        };
        t.add(y, res)
    }
}

#[derive(Clone, Debug)]
pub struct Sstgcn {
    pub config: SstgcnConfig,
    pub layers: Vec<SstgcnLayer>,
}

impl Sstgcn {
    pub fn new<R: Rng>(store: &mut ParamStore, config: SstgcnConfig, rng: &mut R) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config("sstgcn_layers must be at least 1".into()));
        }
        let h = config.temporal_kernel();
        let layers = (0..config.layers)
            .map(|l| {
                let cin = if l == 0 { IN_CHANNELS } else { OUT_CHANNELS };
                SstgcnLayer::new(store, l, cin, OUT_CHANNELS, h, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, layers })
    }

    /// Runs every layer with the same adjacency block; `[T, K, 5]`.
    pub fn forward(&self, ctx: &Ctx, v: Var, a: Var) -> Result<Var> {
        let t = ctx.tape;
        let shape = t.shape(a);
        if shape.len() != 3 || shape[1] != shape[2] || t.shape(v)[..2] != shape[..2] {
            return Err(Error::shape(
                "sstgcn",
                format!("V {:?}, A {shape:?}", t.shape(v)),
            ));
        }
        let a = if self.config.no_spatial {
            let (t_len, k) = (shape[0], shape[1]);
            t.constant(Array::from_fn(&[t_len, k, k], |i| {
                let (r, c) = ((i / k) % k, i % k);
                if r == c {
                    1.0
                } else {
                    0.0
                }
            }))
        } else {
            a
        };
        let mut x = v;
        for layer in &self.layers {
            let z = layer.spatial_conv(ctx, x, a)?;
            let y = layer.temporal_conv(ctx, z, x)?;
            x = match self.config.activation {
                Activation::Tanh => t.tanh(y)?,
                Activation::None => y,
            };
        }
        Ok(x)
    }
}
