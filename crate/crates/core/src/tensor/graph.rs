//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] simply walks it in reverse.

use std::fmt;

use super::kernels;
use super::value::{axis_split, check_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom`]: given the input values, the output
/// value and the gradient flowing into the output, return one gradient per
/// input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Clamp(Var, f64, f64),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Softmax(Var, usize),
    Mean(Var, usize),
    Std(Var, usize),
    Concat(Vec<Var>, usize),
    Stack(Vec<Var>, usize),
    Reshape(Var),
    Sum(Var),
    Index(Var, usize, usize),
    Slice(Var, usize),
    Flip(Var, usize),
    BatchNorm(BatchNormCache),
    Custom(Vec<Var>, CustomBackward),
}

struct BatchNormCache {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Statistics used by [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the rows being processed.
    Batch { eps: f64 },
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Per-column batch statistics produced by a batch-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last backward pass, if the node received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- forward operations ------------------------------------------------

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "elementwise",
                format!("{op:?} on {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let f: fn(f64, f64) -> f64 = match op {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
        };
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        if op == Unary::Log {
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let value = match op {
            // `f64::max` would turn NaN into 0 and hide it.
            Unary::Relu => x.map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 }),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Tanh => x.map(f64::tanh),
            Unary::Exp => x.map(f64::exp),
            Unary::Log => x.map(f64::ln),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Unary(op, a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// `x[R×C] + b` where `b` holds `C` values, added to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let cols = sx[sx.len() - 1];
        if sx.len() != 2 || self.value(b).len() != cols {
            return Err(Error::shape(
                "add_bias",
                format!("bias {sb:?} does not fit {sx:?}"),
            ));
        }
        let bias = self.data(b);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(cols) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    /// Row `r` of `x[R×C]` multiplied by `w[r]`, with `w` of shape `R×1`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || self.value(w).len() != sx[0] {
            return Err(Error::shape(
                "scale_rows",
                format!("weights {sw:?} do not fit {sx:?}"),
            ));
        }
        let cols = sx[1];
        let weights = self.data(w);
        let mut data = self.data(x).to_vec();
        for (row, &wr) in data.chunks_mut(cols).zip(weights) {
            row.iter_mut().for_each(|v| *v *= wr);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::ScaleRows(x, w), rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split("softmax", self.shape(x), axis)?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (src[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[idx(i)] /= total;
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split("mean", &shape, axis)?;
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let base = (o * len + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] += src[base + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let value = Tensor::new(reduced_shape(&shape, axis), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Mean(x, axis), rg))
    }

    /// Population standard deviation `sqrt(var + eps)` along `axis`.
    pub fn std_axis(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split("std", &shape, axis)?;
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| src[(o * len + i) * inner + j];
                let mean = (0..len).map(at).sum::<f64>() / len as f64;
                let var = (0..len).map(|i| (at(i) - mean).powi(2)).sum::<f64>() / len as f64;
                out[o * inner + j] = (var + eps).sqrt();
            }
        }
        let value = Tensor::new(reduced_shape(&shape, axis), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Std(x, axis), rg))
    }

    /// Mean and population standard deviation along `axis`.
    pub fn mean_std_axis(&mut self, x: Var, axis: usize, eps: f64) -> Result<(Var, Var)> {
        Ok((self.mean_axis(x, axis)?, self.std_axis(x, axis, eps)?))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        axis_split("concat", &base, axis)?;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
        }
        let total: usize = xs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split("concat", &shape, axis)?;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Stack equally shaped tensors along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("stack", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis > base.len() {
            return Err(Error::shape("stack", format!("axis {axis} out of range")));
        }
        if xs.iter().any(|&v| self.shape(v) != base.as_slice()) {
            return Err(Error::shape("stack", "inputs differ in shape"));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * inner * xs.len());
        for o in 0..outer {
            for &v in xs {
                out.extend_from_slice(&self.data(v)[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, xs.len());
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(value, Op::Stack(xs.to_vec(), axis), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape("reshape", shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} into {shape:?}", self.shape(x)),
            ));
        }
        let value = Tensor::new(shape.to_vec(), self.data(x).to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Select position `index` along `axis`; the axis is removed.
    pub fn index_axis(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split("index_axis", &shape, axis)?;
        if index >= len {
            return Err(Error::shape(
                "index_axis",
                format!("index {index} out of range {len}"),
            ));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * len + index) * inner;
            out.extend_from_slice(&src[start..start + inner]);
        }
        let mut new_shape = reduced_shape(&shape, axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(new_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Index(x, axis, index), rg))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {shape:?}", start + len),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut new_shape = shape;
        new_shape[0] = len;
        let value = Tensor::new(new_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice(x, start), rg))
    }

    /// Reverse the order of elements along `axis`.
    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split("flip", &shape, axis)?;
        let out = flip_data(self.data(x), outer, len, inner);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Flip(x, axis), rg))
    }

    /// Per-column normalization of `x[R×C]` followed by `gamma ⊙ x̂ + beta`.
    ///
    /// In batch mode the statistics of the `R` rows are used and returned so
    /// the caller can maintain running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<ColumnStats>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::shape("batch_norm", format!("expected 2-D input, got {sx:?}")));
        }
        let (rows, cols) = (sx[0], sx[1]);
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::shape(
                "batch_norm",
                format!("parameters do not match width {cols}"),
            ));
        }
        let src = self.data(x);
        let (mean, var, eps, batch) = match stats {
            NormStats::Batch { eps } => {
                let mut mean = vec![0.0; cols];
                for row in src.chunks(cols) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; cols];
                for row in src.chunks(cols) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != cols || var.len() != cols {
                    return Err(Error::shape("batch_norm", "running statistics width"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                xhat[i] = (src[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
        let value = Tensor::new(sx, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let cache = BatchNormCache {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: batch,
        };
        let v = self.push(value, Op::BatchNorm(cache), rg);
        Ok((v, batch.then_some(ColumnStats { mean, var })))
    }

    /// Record an operation whose forward value is computed by the caller and
    /// whose backward rule is supplied as a closure.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), backward), rg)
    }

    // ---- backward -------------------------------------------------------

    /// Accumulate `d loss / d leaf` into every tracked leaf reachable from a
    /// scalar `loss`. A graph can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::full(self.shape(loss).to_vec(), 1.0);
        self.backward_with(loss, seed)
    }

    /// Backward pass seeded with an explicit output gradient.
    pub fn backward_with(&mut self, output: Var, seed: Tensor) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("backward", "seed gradient shape"));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.grads[output.0] = Some(seed.into_data());
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(contribution.len(), self.nodes[v.0].value.len());
        match &mut self.grads[v.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(&contribution)
                .for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut pending: Vec<(Var, Vec<f64>)> = Vec::new();
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    pending.push((*a, kernels::matmul_nt(g, val(*b).data(), m, k, n)));
                }
                if rg(*b) {
                    pending.push((*b, kernels::matmul_tn(val(*a).data(), g, m, k, n)));
                }
            }
            Op::Binary(op, a, b) => match op {
                Binary::Add => {
                    pending.push((*a, g.to_vec()));
                    pending.push((*b, g.to_vec()));
                }
                Binary::Sub => {
                    pending.push((*a, g.to_vec()));
                    pending.push((*b, g.iter().map(|x| -x).collect()));
                }
                Binary::Mul => {
                    if rg(*a) {
                        pending.push((*a, zip_mul(g, val(*b).data())));
                    }
                    if rg(*b) {
                        pending.push((*b, zip_mul(g, val(*a).data())));
                    }
                }
            },
            Op::Unary(op, a) => {
                let x = val(*a).data();
                let y = out.data();
                let d: Vec<f64> = match op {
                    Unary::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Exp => zip_mul(g, y),
                    Unary::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                };
                pending.push((*a, d));
            }
            Op::AddScalar(a) => pending.push((*a, g.to_vec())),
            Op::MulScalar(a, s) => pending.push((*a, g.iter().map(|x| x * s).collect())),
            Op::Clamp(a, lo, hi) => {
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| if x > lo && x < hi { *g } else { 0.0 })
                    .collect();
                pending.push((*a, d));
            }
            Op::AddBias(x, b) => {
                let cols = val(*b).len();
                pending.push((*x, g.to_vec()));
                if rg(*b) {
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    pending.push((*b, gb));
                }
            }
            Op::ScaleRows(x, w) => {
                let cols = val(*x).shape()[1];
                let weights = val(*w).data();
                if rg(*x) {
                    let mut gx = g.to_vec();
                    for (row, &wr) in gx.chunks_mut(cols).zip(weights) {
                        row.iter_mut().for_each(|v| *v *= wr);
                    }
                    pending.push((*x, gx));
                }
                if rg(*w) {
                    let gw = g
                        .chunks(cols)
                        .zip(val(*x).data().chunks(cols))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    pending.push((*w, gw));
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split("softmax", out.shape(), *axis).unwrap();
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..len {
                            gx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                pending.push((*x, gx));
            }
            Op::Mean(x, axis) => {
                let (outer, len, inner) = axis_split("mean", val(*x).shape(), *axis).unwrap();
                let mut gx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    for i in 0..len {
                        for j in 0..inner {
                            gx[(o * len + i) * inner + j] = g[o * inner + j] / len as f64;
                        }
                    }
                }
                pending.push((*x, gx));
            }
            Op::Std(x, axis) => {
                let src = val(*x).data();
                let (outer, len, inner) = axis_split("std", val(*x).shape(), *axis).unwrap();
                let s = out.data();
                let mut gx = vec![0.0; src.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let mean = (0..len).map(|i| src[idx(i)]).sum::<f64>() / len as f64;
                        let k = g[o * inner + j] / (len as f64 * s[o * inner + j]);
                        for i in 0..len {
                            gx[idx(i)] = k * (src[idx(i)] - mean);
                        }
                    }
                }
                pending.push((*x, gx));
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = axis_split("concat", out.shape(), *axis).unwrap();
                let total = out.shape()[*axis];
                let mut offset = 0;
                for &v in xs {
                    let len = val(v).shape()[*axis];
                    if rg(v) {
                        let mut gv = Vec::with_capacity(val(v).len());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[start..start + len * inner]);
                        }
                        pending.push((v, gv));
                    }
                    offset += len;
                }
            }
            Op::Stack(xs, axis) => {
                let base = val(xs[0]).shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[*axis..].iter().product();
                for (k, &v) in xs.iter().enumerate() {
                    if rg(v) {
                        let mut gv = Vec::with_capacity(outer * inner);
                        for o in 0..outer {
                            let start = (o * xs.len() + k) * inner;
                            gv.extend_from_slice(&g[start..start + inner]);
                        }
                        pending.push((v, gv));
                    }
                }
            }
            Op::Reshape(x) => pending.push((*x, g.to_vec())),
            Op::Sum(x) => pending.push((*x, vec![g[0]; val(*x).len()])),
            Op::Index(x, axis, index) => {
                let (outer, len, inner) = axis_split("index_axis", val(*x).shape(), *axis).unwrap();
                let mut gx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let start = (o * len + index) * inner;
                    gx[start..start + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                pending.push((*x, gx));
            }
            Op::Slice(x, start) => {
                let inner: usize = val(*x).shape()[1..].iter().product();
                let mut gx = vec![0.0; val(*x).len()];
                gx[start * inner..start * inner + g.len()].copy_from_slice(g);
                pending.push((*x, gx));
            }
            Op::Flip(x, axis) => {
                let (outer, len, inner) = axis_split("flip", out.shape(), *axis).unwrap();
                pending.push((*x, flip_data(g, outer, len, inner)));
            }
            Op::BatchNorm(c) => {
                let cols = c.inv_std.len();
                let rows = g.len() / cols;
                let gamma = val(c.gamma).data();
                let mut g_gamma = vec![0.0; cols];
                let mut g_beta = vec![0.0; cols];
                for r in 0..rows {
                    for k in 0..cols {
                        let i = r * cols + k;
                        g_gamma[k] += g[i] * c.xhat[i];
                        g_beta[k] += g[i];
                    }
                }
                if rg(c.x) {
                    let mut gx = vec![0.0; g.len()];
                    if c.train {
                        let n = rows as f64;
                        for r in 0..rows {
                            for k in 0..cols {
                                let i = r * cols + k;
                                let gxhat = g[i] * gamma[k];
                                gx[i] = c.inv_std[k] / n
                                    * (n * gxhat - gamma[k] * g_beta[k] - gamma[k] * c.xhat[i] * g_gamma[k]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for k in 0..cols {
                                let i = r * cols + k;
                                gx[i] = g[i] * gamma[k] * c.inv_std[k];
                            }
                        }
                    }
                    pending.push((c.x, gx));
                }
                pending.push((c.gamma, g_gamma));
                pending.push((c.beta, g_beta));
            }
            Op::Custom(inputs, backward) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grad_out = Tensor::new(out.shape().to_vec(), g.to_vec()).expect("grad shape");
                let grads = backward(&values, out, &grad_out);
                for (&v, gv) in inputs.iter().zip(grads) {
                    assert_eq!(gv.shape(), val(v).shape(), "custom backward returned wrong shape");
                    pending.push((v, gv.into_data()));
                }
            }
        }
        for (v, contribution) in pending {
            self.accumulate(v, contribution);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn flip_data(src: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(src.len());
    for o in 0..outer {
        for i in (0..len).rev() {
            let start = (o * len + i) * inner;
            out.extend_from_slice(&src[start..start + inner]);
        }
    }
    out
}
