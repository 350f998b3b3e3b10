//! Dense row-major `f64` arrays and the trailing-dimension broadcasting rule.
//!
//! Broadcasting follows the usual rule: shapes are aligned on their trailing
//! axes, missing leading axes are treated as extent 1, and an axis of extent 1
//! stretches to match the other operand.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "array",
                format!(
                    "shape {:?} needs {} values, got {}",
                    shape,
                    expected,
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Rank-1 array holding `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an array by evaluating `f` on every flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on array of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(
                ix < ext,
                "index {ix} out of range for axis {i} of extent {ext}"
            );
            off = off * ext + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Array> {
        Array::new(shape.to_vec(), self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Array) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array{:?}{:?}", self.shape, self.data)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Result shape of broadcasting `a` against `b`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("{a:?} is not broadcast-compatible with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// How a source array is indexed when broadcast to a larger shape.
pub(crate) enum BroadcastMap {
    Identity,
    /// Source is a trailing block repeated; source index = out index % len.
    Modulo(usize),
    Explicit(Vec<usize>),
}

impl BroadcastMap {
    pub(crate) fn new(src: &[usize], out: &[usize]) -> Self {
        if src == out {
            return BroadcastMap::Identity;
        }
        let src_len: usize = src.iter().product();
        // Trailing-suffix case (leading ones stripped).
        let trimmed: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return BroadcastMap::Modulo(src_len.max(1));
        }
        let rank = out.len();
        let pad = rank - src.len();
        let src_strides = strides(src);
        let mut eff = vec![0usize; rank];
        for i in 0..src.len() {
            eff[pad + i] = if src[i] == 1 { 0 } else { src_strides[i] };
        }
        let n: usize = out.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            map.push(idx.iter().zip(&eff).map(|(a, b)| a * b).sum());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        BroadcastMap::Explicit(map)
    }

    #[inline]
    pub(crate) fn get(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Identity => i,
            BroadcastMap::Modulo(m) => i % m,
            BroadcastMap::Explicit(v) => v[i],
        }
    }
}

/// Sums `grad` (of shape `out`) back down to `src` under the broadcast map.
pub(crate) fn reduce_to(grad: &Array, src: &[usize]) -> Array {
    if grad.shape() == src {
        return grad.clone();
    }
    let map = BroadcastMap::new(src, grad.shape());
    let mut out = Array::zeros(src);
    for (i, g) in grad.data().iter().enumerate() {
        out.data[map.get(i)] += g;
    }
    out
}

/// Decomposes `shape` around `axis` into (outer, extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
