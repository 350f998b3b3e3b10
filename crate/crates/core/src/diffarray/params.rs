use std::collections::HashMap;

use rand::Rng;

use super::array::Array;
use super::tape::Gradients;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable array with a stable name used by the checkpoint format.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Array,
    grad: Array,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn grad(&self) -> &Array {
        &self.grad
    }
}

/// Owns every parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Array) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Array::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Registers a parameter drawn uniformly from ±1/√fan_in.
    pub fn register_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.register(name, value)
    }

    pub fn register_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.register(name, Array::zeros(shape))
    }

    pub fn register_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.register(name, Array::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the parameter gradients of one backward pass into the stored grads.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.param_grads() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    /// Replaces every value with the corresponding one from `other`, which must
    /// hold the same names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::invalid("parameter stores differ in size"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::invalid(format!(
                    "parameter `{}` does not match `{}`",
                    dst.name, src.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
