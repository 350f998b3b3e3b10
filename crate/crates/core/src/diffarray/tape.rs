//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation pushes a node holding its value and the handles of its
//! inputs. Inputs always precede their outputs on the tape, so the graph is
//! acyclic by construction and a reverse sweep over node indices is a valid
//! reverse topological order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::array::{broadcast_shape, reduce_to, split_axis, strides, Array, BroadcastMap};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Tanh,
    Neg,
    Sqrt,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        pad: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Reduce {
        op: ReduceOp,
        x: Var,
        axis: Option<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
}

struct Node {
    value: Rc<Array>,
    op: Op,
    requires_grad: bool,
}

/// A differentiation graph under construction.
///
/// Confined to one thread; build a fresh tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

fn check_finite(op: &'static str, a: &Array) -> Result<()> {
    if a.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_checked(&self, name: &'static str, value: Array, op: Op, rg: bool) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(value, op, rg))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// A differentiable input whose gradient is reported by [`Gradients::get`].
    pub fn var(&self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Brings a stored parameter onto the tape. Repeated calls for the same id
    /// return the same node, so every use accumulates into one gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.borrow_mut().insert(id, v);
        v
    }

    // ---- elementwise ----------------------------------------------------

    pub fn binary(&self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let shape = broadcast_shape(x.shape(), y.shape())?;
            let n: usize = shape.iter().product();
            let mx = BroadcastMap::new(x.shape(), &shape);
            let my = BroadcastMap::new(y.shape(), &shape);
            let (xd, yd) = (x.data(), y.data());
            if op == BinaryOp::Div && yd.contains(&0.0) {
                return Err(Error::domain("div", "division by zero"));
            }
            let f: fn(f64, f64) -> f64 = match op {
                BinaryOp::Add => |p, q| p + q,
                BinaryOp::Sub => |p, q| p - q,
                BinaryOp::Mul => |p, q| p * q,
                BinaryOp::Div => |p, q| p / q,
            };
            let data = (0..n).map(|i| f(xd[mx.get(i)], yd[my.get(i)])).collect();
            (
                Array::new(shape, data)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        self.push_checked("binary", out, Op::Binary(op, a, b), rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&self, op: UnaryOp, a: Var) -> Result<Var> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            match op {
                UnaryOp::Log if x.data().iter().any(|&v| v <= 0.0) => {
                    return Err(Error::domain("log", "log of a non-positive value"))
                }
                UnaryOp::Sqrt if x.data().iter().any(|&v| v < 0.0) => {
                    return Err(Error::domain("sqrt", "sqrt of a negative value"))
                }
                _ => {}
            }
            let out = match op {
                UnaryOp::Exp => x.map(f64::exp),
                UnaryOp::Log => x.map(f64::ln),
                UnaryOp::Tanh => x.map(f64::tanh),
                UnaryOp::Neg => x.map(|v| -v),
                UnaryOp::Sqrt => x.map(f64::sqrt),
                UnaryOp::Relu => x.map(|v| v.max(0.0)),
            };
            (out, nodes[a.0].requires_grad)
        };
        self.push_checked("unary", out, Op::Unary(op, a), rg)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + s);
        let rg = self.rg(&[a]);
        self.push_checked("add_scalar", out, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push_checked("mul_scalar", out, Op::MulScalar(a, s), rg)
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product over the last two axes.
    ///
    /// `b` may be rank 2, in which case it is shared across every batch of `a`.
    /// A rank-1 `a` is treated as a single row and the row axis is dropped.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let out = matmul_forward(x, y)?;
            (out, nodes[a.0].requires_grad || nodes[b.0].requires_grad)
        };
        self.push_checked("matmul", out, Op::MatMul(a, b), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", "needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let r = x.rank();
        let mut seen = vec![false; r];
        if axes.len() != r
            || axes
                .iter()
                .any(|&ax| ax >= r || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{axes:?} is not a permutation of rank {r}"),
            ));
        }
        let out = permute_array(&x, axes);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let out = Array::new(shape.to_vec(), x.data().to_vec())
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {:?}", x.shape(), shape)))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Convolution over the leading (time) axis of `x: [T, K, Cin]` with
    /// `kernel: [H, 1, Cin, Cout]`. The slot axis is never mixed.
    pub fn conv2d(&self, x: Var, kernel: Var, pad: usize) -> Result<Var> {
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let (xv, kv) = (&nodes[x.0].value, &nodes[kernel.0].value);
            let (xs, ks) = (xv.shape(), kv.shape());
            if xs.len() != 3 || ks.len() != 4 {
                return Err(Error::shape("conv2d", format!("x {xs:?}, kernel {ks:?}")));
            }
            let (h, w, cin, cout) = (ks[0], ks[1], ks[2], ks[3]);
            if h % 2 == 0 {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel height {h} must be odd"),
                ));
            }
            if w != 1 {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel width {w} must be 1"),
                ));
            }
            if xs[2] != cin {
                return Err(Error::shape(
                    "conv2d",
                    format!("x channels {} != kernel Cin {cin}", xs[2]),
                ));
            }
            if pad != (h - 1) / 2 {
                return Err(Error::shape(
                    "conv2d",
                    format!("padding {pad} must be (H-1)/2 = {}", (h - 1) / 2),
                ));
            }
            let (t_len, k_len) = (xs[0], xs[1]);
            let mut out = Array::zeros(&[t_len, k_len, cout]);
            let (xd, kd) = (xv.data(), kv.data());
            let od = out.data_mut();
            for t in 0..t_len {
                for dh in 0..h {
                    let src = t as isize + dh as isize - pad as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let src = src as usize;
                    for k in 0..k_len {
                        let xrow = &xd[(src * k_len + k) * cin..][..cin];
                        let orow = &mut od[(t * k_len + k) * cout..][..cout];
                        for (c, &xval) in xrow.iter().enumerate() {
                            let krow = &kd[(dh * cin + c) * cout..][..cout];
                            for (o, &kval) in orow.iter_mut().zip(krow) {
                                *o += xval * kval;
                            }
                        }
                    }
                }
            }
            (
                out,
                nodes[x.0].requires_grad || nodes[kernel.0].requires_grad,
            )
        };
        self.push_checked("conv2d", out, Op::Conv2d { x, kernel, pad }, rg)
    }

    // ---- normalisation and reductions ----------------------------------

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis`. Entries where `mask` is `false` receive exactly
    /// zero probability, as if an additive −∞ had been applied.
    pub fn softmax_masked(&self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range")));
        }
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(Error::shape("softmax", "mask length differs from input"));
            }
        }
        check_finite("softmax", &xv)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = Array::zeros(xv.shape());
        let (xd, od) = (xv.data(), out.data_mut());
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let allowed = |i: usize| mask.is_none_or(|m| m[at(i)]);
                let mut max = f64::NEG_INFINITY;
                for i in 0..n {
                    if allowed(i) {
                        max = max.max(xd[at(i)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::domain("softmax", "every entry of a row is masked"));
                }
                let mut total = 0.0;
                for i in 0..n {
                    if allowed(i) {
                        let e = (xd[at(i)] - max).exp();
                        od[at(i)] = e;
                        total += e;
                    }
                }
                for i in 0..n {
                    od[at(i)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Sum or mean over one axis, or over everything when `axis` is `None`
    /// (the result then has shape `[1]`).
    pub fn reduce(&self, op: ReduceOp, x: Var, axis: Option<usize>, keepdim: bool) -> Result<Var> {
        let xv = self.value(x);
        let out = match axis {
            None => {
                let s = xv.sum();
                let v = match op {
                    ReduceOp::Sum => s,
                    ReduceOp::Mean => s / xv.len().max(1) as f64,
                };
                Array::scalar(v)
            }
            Some(ax) => {
                if ax >= xv.rank() {
                    return Err(Error::shape("reduce", format!("axis {ax} out of range")));
                }
                let (outer, n, inner) = split_axis(xv.shape(), ax);
                let mut shape = xv.shape().to_vec();
                if keepdim {
                    shape[ax] = 1;
                } else {
                    shape.remove(ax);
                }
                let scale = match op {
                    ReduceOp::Sum => 1.0,
                    ReduceOp::Mean => 1.0 / n.max(1) as f64,
                };
                let xd = xv.data();
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..n {
                        let row = &xd[(o * n + i) * inner..][..inner];
                        for (d, v) in data[o * inner..][..inner].iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                data.iter_mut().for_each(|d| *d *= scale);
                Array::new(shape, data)?
            }
        };
        let rg = self.rg(&[x]);
        self.push_checked("reduce", out, Op::Reduce { op, x, axis }, rg)
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, None, false)
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, None, false)
    }

    pub fn sum_axis(&self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, Some(axis), keepdim)
    }

    pub fn mean_axis(&self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, Some(axis), keepdim)
    }

    // ---- indexing -------------------------------------------------------

    /// The sub-range `start..start + len` of `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || start + len > xv.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!(
                    "{start}+{len} out of range for axis {axis} of {:?}",
                    xv.shape()
                ),
            ));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(
                &xv.data()[(o * n + start) * inner..(o * n + start + len) * inner],
            );
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Array::new(shape, data)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Gathers the listed positions of `axis`, in order.
    pub fn index_select(&self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || indices.iter().any(|&i| i >= xv.shape()[axis]) {
            return Err(Error::shape(
                "index_select",
                format!("{indices:?} on axis {axis} of {:?}", xv.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                data.extend_from_slice(&xv.data()[(o * n + i) * inner..][..inner]);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = indices.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Array::new(shape, data)?,
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let values: Vec<Rc<Array>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values[0].shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let n = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Array::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates d(root)/d(node) to every node reachable from `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "root must be scalar, got shape {:?}",
                    nodes[root.0].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Array>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array::ones(nodes[root.0].value.shape()));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            let val = |v: Var| -> &Array { &nodes[v.0].value };
            let needs = |v: Var| nodes[v.0].requires_grad;
            let mut emit = |v: Var, contrib: Array| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::Binary(op, a, b) => {
                    let (a, b) = (*a, *b);
                    let (x, y) = (val(a), val(b));
                    let shape = g.shape().to_vec();
                    match op {
                        BinaryOp::Add => {
                            if needs(a) {
                                emit(a, reduce_to(&g, x.shape()));
                            }
                            if needs(b) {
                                emit(b, reduce_to(&g, y.shape()));
                            }
                        }
                        BinaryOp::Sub => {
                            if needs(a) {
                                emit(a, reduce_to(&g, x.shape()));
                            }
                            if needs(b) {
                                emit(b, reduce_to(&g.map(|v| -v), y.shape()));
                            }
                        }
                        BinaryOp::Mul | BinaryOp::Div => {
                            let mx = BroadcastMap::new(x.shape(), &shape);
                            let my = BroadcastMap::new(y.shape(), &shape);
                            let (xd, yd, gd) = (x.data(), y.data(), g.data());
                            let is_mul = *op == BinaryOp::Mul;
                            if needs(a) {
                                let ga = Array::from_fn(&shape, |k| {
                                    let q = yd[my.get(k)];
                                    if is_mul {
                                        gd[k] * q
                                    } else {
                                        gd[k] / q
                                    }
                                });
                                emit(a, reduce_to(&ga, x.shape()));
                            }
                            if needs(b) {
                                let gb = Array::from_fn(&shape, |k| {
                                    let p = xd[mx.get(k)];
                                    let q = yd[my.get(k)];
                                    if is_mul {
                                        gd[k] * p
                                    } else {
                                        -gd[k] * p / (q * q)
                                    }
                                });
                                emit(b, reduce_to(&gb, y.shape()));
                            }
                        }
                    }
                }
                Op::Unary(op, a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let gd = g.data();
                    let ga =
                        match op {
                            UnaryOp::Exp => Array::from_fn(x.shape(), |k| gd[k] * y.data()[k]),
                            UnaryOp::Log => Array::from_fn(x.shape(), |k| gd[k] / x.data()[k]),
                            UnaryOp::Tanh => Array::from_fn(x.shape(), |k| {
                                gd[k] * (1.0 - y.data()[k] * y.data()[k])
                            }),
                            UnaryOp::Neg => g.map(|v| -v),
                            UnaryOp::Sqrt => {
                                Array::from_fn(x.shape(), |k| gd[k] / (2.0 * y.data()[k]))
                            }
                            UnaryOp::Relu => Array::from_fn(x.shape(), |k| {
                                if x.data()[k] > 0.0 {
                                    gd[k]
                                } else {
                                    0.0
                                }
                            }),
                        };
                    emit(*a, ga);
                }
                Op::AddScalar(a) => emit(*a, g),
                Op::MulScalar(a, s) => {
                    let s = *s;
                    emit(*a, g.map(|v| v * s));
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (x, y) = (val(a), val(b));
                    if needs(a) {
                        emit(a, matmul_grad_a(&g, x, y));
                    }
                    if needs(b) {
                        emit(b, matmul_grad_b(&g, x, y));
                    }
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    emit(*a, permute_array(&g, &inv));
                }
                Op::Reshape(a) => {
                    let s = val(*a).shape().to_vec();
                    emit(*a, g.reshape(&s)?);
                }
                Op::Conv2d { x, kernel, pad } => {
                    let (x, kernel, pad) = (*x, *kernel, *pad);
                    let (gx, gk) = conv2d_grads(&g, val(x), val(kernel), pad);
                    if needs(x) {
                        emit(x, gx);
                    }
                    if needs(kernel) {
                        emit(kernel, gk);
                    }
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let (outer, n, inner) = split_axis(y.shape(), *axis);
                    let (yd, gd) = (y.data(), g.data());
                    let mut gx = Array::zeros(y.shape());
                    let gxd = gx.data_mut();
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * n + i) * inner + j;
                            let dot: f64 = (0..n).map(|i| gd[at(i)] * yd[at(i)]).sum();
                            for i in 0..n {
                                gxd[at(i)] = yd[at(i)] * (gd[at(i)] - dot);
                            }
                        }
                    }
                    emit(*x, gx);
                }
                Op::Reduce { op, x, axis } => {
                    let xs = val(*x).shape().to_vec();
                    let gx = match axis {
                        None => {
                            let scale = match op {
                                ReduceOp::Sum => 1.0,
                                ReduceOp::Mean => 1.0 / xs.iter().product::<usize>().max(1) as f64,
                            };
                            Array::full(&xs, g.item() * scale)
                        }
                        Some(ax) => {
                            let (_, n, inner) = split_axis(&xs, *ax);
                            let scale = match op {
                                ReduceOp::Sum => 1.0,
                                ReduceOp::Mean => 1.0 / n.max(1) as f64,
                            };
                            let gd = g.data();
                            Array::from_fn(&xs, |k| {
                                let o = k / (n * inner);
                                let j = k % inner;
                                gd[o * inner + j] * scale
                            })
                        }
                    };
                    emit(*x, gx);
                }
                Op::Narrow { x, axis, start } => {
                    let xs = val(*x).shape().to_vec();
                    let (outer, n, inner) = split_axis(&xs, *axis);
                    let len = g.shape()[*axis];
                    let mut gx = Array::zeros(&xs);
                    for o in 0..outer {
                        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                        gx.data_mut()[(o * n + start) * inner..(o * n + start + len) * inner]
                            .copy_from_slice(src);
                    }
                    emit(*x, gx);
                }
                Op::IndexSelect { x, axis, indices } => {
                    let xs = val(*x).shape().to_vec();
                    let (outer, n, inner) = split_axis(&xs, *axis);
                    let m = indices.len();
                    let mut gx = Array::zeros(&xs);
                    for o in 0..outer {
                        for (r, &i) in indices.iter().enumerate() {
                            let src = &g.data()[(o * m + r) * inner..][..inner];
                            let dst = &mut gx.data_mut()[(o * n + i) * inner..][..inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    emit(*x, gx);
                }
                Op::Concat { parts, axis } => {
                    let total = g.shape()[*axis];
                    let (outer, _, inner) = split_axis(g.shape(), *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let ps = val(p).shape().to_vec();
                        let n = ps[*axis];
                        if needs(p) {
                            let mut data = Vec::with_capacity(outer * n * inner);
                            for o in 0..outer {
                                data.extend_from_slice(
                                    &g.data()[(o * total + offset) * inner
                                        ..(o * total + offset + n) * inner],
                                );
                            }
                            emit(p, Array::new(ps, data)?);
                        }
                        offset += n;
                    }
                }
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .take(root.0 + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradients produced by one [`Tape::backward`] sweep.
pub struct Gradients {
    grads: Vec<Option<Array>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// d(root)/d(v), or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.params
            .iter()
            .filter_map(|&(id, i)| self.grads[i].as_ref().map(|g| (id, g)))
    }
}

fn permute_array(x: &Array, axes: &[usize]) -> Array {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let r = out_shape.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    let xd = x.data();
    for _ in 0..n {
        data.push(xd[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Array::new(out_shape, data).expect("permute preserves length")
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn matmul_dims(x: &Array, y: &Array) -> Result<(MatDims, Vec<usize>)> {
    let (xs, ys) = (x.shape(), y.shape());
    if ys.len() < 2 || xs.is_empty() {
        return Err(Error::shape("matmul", format!("{xs:?} x {ys:?}")));
    }
    let row_vector = xs.len() == 1;
    let (m, k) = if row_vector {
        (1, xs[0])
    } else {
        (xs[xs.len() - 2], xs[xs.len() - 1])
    };
    let (k2, n) = (ys[ys.len() - 2], ys[ys.len() - 1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {xs:?} x {ys:?}"),
        ));
    }
    let xbatch: &[usize] = if row_vector { &[] } else { &xs[..xs.len() - 2] };
    let ybatch = &ys[..ys.len() - 2];
    let shared_b = ybatch.is_empty();
    if !shared_b && xbatch != ybatch {
        return Err(Error::shape(
            "matmul",
            format!("batch extents differ: {xs:?} x {ys:?}"),
        ));
    }
    let batch = xbatch.iter().product();
    let mut out_shape = xbatch.to_vec();
    if !row_vector {
        out_shape.push(m);
    }
    out_shape.push(n);
    Ok((
        MatDims {
            batch,
            m,
            k,
            n,
            shared_b,
        },
        out_shape,
    ))
}

fn matmul_forward(x: &Array, y: &Array) -> Result<Array> {
    let (d, shape) = matmul_dims(x, y)?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    let (xd, yd) = (x.data(), y.data());
    for bt in 0..d.batch {
        let xb = &xd[bt * d.m * d.k..][..d.m * d.k];
        let yb = if d.shared_b {
            yd
        } else {
            &yd[bt * d.k * d.n..][..d.k * d.n]
        };
        let ob = &mut out[bt * d.m * d.n..][..d.m * d.n];
        for i in 0..d.m {
            let orow = &mut ob[i * d.n..][..d.n];
            for p in 0..d.k {
                let a = xb[i * d.k + p];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(&yb[p * d.n..][..d.n]) {
                    *o += a * b;
                }
            }
        }
    }
    Array::new(shape, out)
}

// dA = G · Bᵀ
fn matmul_grad_a(g: &Array, x: &Array, y: &Array) -> Array {
    let (d, _) = matmul_dims(x, y).expect("validated in forward");
    let mut ga = vec![0.0; d.batch * d.m * d.k];
    let (gd, yd) = (g.data(), y.data());
    for bt in 0..d.batch {
        let gb = &gd[bt * d.m * d.n..][..d.m * d.n];
        let yb = if d.shared_b {
            yd
        } else {
            &yd[bt * d.k * d.n..][..d.k * d.n]
        };
        let ab = &mut ga[bt * d.m * d.k..][..d.m * d.k];
        for i in 0..d.m {
            for p in 0..d.k {
                let mut s = 0.0;
                for j in 0..d.n {
                    s += gb[i * d.n + j] * yb[p * d.n + j];
                }
                ab[i * d.k + p] = s;
            }
        }
    }
    Array::new(x.shape().to_vec(), ga).expect("shape")
}

// dB = Aᵀ · G, summed over the batch when B is shared.
fn matmul_grad_b(g: &Array, x: &Array, y: &Array) -> Array {
    let (d, _) = matmul_dims(x, y).expect("validated in forward");
    let mut gbv = vec![0.0; y.len()];
    let (gd, xd) = (g.data(), x.data());
    for bt in 0..d.batch {
        let gb = &gd[bt * d.m * d.n..][..d.m * d.n];
        let xb = &xd[bt * d.m * d.k..][..d.m * d.k];
        let off = if d.shared_b { 0 } else { bt * d.k * d.n };
        let bb = &mut gbv[off..][..d.k * d.n];
        for i in 0..d.m {
            for p in 0..d.k {
                let a = xb[i * d.k + p];
                if a == 0.0 {
                    continue;
                }
                for (o, &gv) in bb[p * d.n..][..d.n].iter_mut().zip(&gb[i * d.n..][..d.n]) {
                    *o += a * gv;
                }
            }
        }
    }
    Array::new(y.shape().to_vec(), gbv).expect("shape")
}

fn conv2d_grads(g: &Array, x: &Array, kernel: &Array, pad: usize) -> (Array, Array) {
    let (xs, ks) = (x.shape(), kernel.shape());
    let (t_len, k_len, cin) = (xs[0], xs[1], xs[2]);
    let (h, cout) = (ks[0], ks[3]);
    let mut gx = Array::zeros(xs);
    let mut gk = Array::zeros(ks);
    let (xd, kd, gd) = (x.data(), kernel.data(), g.data());
    for t in 0..t_len {
        for dh in 0..h {
            let src = t as isize + dh as isize - pad as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let src = src as usize;
            for k in 0..k_len {
                let grow = &gd[(t * k_len + k) * cout..][..cout];
                let xoff = (src * k_len + k) * cin;
                for c in 0..cin {
                    let koff = (dh * cin + c) * cout;
                    let mut acc = 0.0;
                    let xval = xd[xoff + c];
                    for o in 0..cout {
                        acc += grow[o] * kd[koff + o];
                        gk.data_mut()[koff + o] += grow[o] * xval;
                    }
                    gx.data_mut()[xoff + c] += acc;
                }
            }
        }
    }
    (gx, gk)
}
