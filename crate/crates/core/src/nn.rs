//! Small building blocks shared by the learned modules: a forward context,
//! affine layers, layer normalisation and dropout.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffarray::{Array, ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// Dropout state for one training forward pass.
pub struct Dropout {
    pub rate: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

/// Everything a forward pass needs besides its inputs.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    pub params: &'a ParamStore,
    /// `None` in evaluation mode.
    pub dropout: Option<&'a Dropout>,
}

impl<'a> Ctx<'a> {
    pub fn eval(tape: &'a Tape, params: &'a ParamStore) -> Self {
        Self {
            tape,
            params,
            dropout: None,
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    /// Inverted dropout: identity in evaluation mode or at rate 0.
    pub fn dropout(&self, x: Var) -> Result<Var> {
        let Some(d) = self.dropout else { return Ok(x) };
        if d.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - d.rate;
        let shape = self.tape.shape(x);
        let mut rng = d.rng.borrow_mut();
        let mask = Array::from_fn(&shape, |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.tape.constant(mask);
        self.tape.mul(x, m)
    }
}

/// `y = x·W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.register_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng)?;
        let b = if bias {
            Some(store.register_zeros(format!("{name}.b"), &[fan_out])?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let y = t.matmul(x, ctx.param(self.w))?;
        match self.b {
            Some(b) => t.add(y, ctx.param(b)),
            None => Ok(y),
        }
    }
}

/// Normalisation over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register_ones(format!("{name}.gain"), &[dim])?,
            bias: store.register_zeros(format!("{name}.bias"), &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let axis = t.shape(x).len() - 1;
        let mean = t.mean_axis(x, axis, true)?;
        let centred = t.sub(x, mean)?;
        let var = t.mean_axis(t.mul(centred, centred)?, axis, true)?;
        let inv = t.sqrt(t.add_scalar(var, self.eps)?)?;
        let normed = t.div(centred, inv)?;
        t.add(t.mul(normed, ctx.param(self.gain))?, ctx.param(self.bias))
    }
}
