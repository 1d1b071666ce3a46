//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive in creation order, which is also a
//! topological order, so [`Tape::backward`] is a single reverse sweep.
//! Binary elementwise primitives broadcast operands of equal rank along
//! axes of length 1. Kinks (`relu`, `abs`, extrema) take subgradient 0 or
//! route to the first maximiser.

mod check;
mod tensor;

pub use check::{gradient_check, GradCheck};
pub use tensor::Tensor;

use tensor::{axis_split, broadcast_map, broadcast_shape};
use thiserror::Error;

/// Floor applied to `t` inside `log(t)` and `t^(w-1)` of the `pow` gradient.
pub const POW_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("gradient requested for non-scalar output of shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: all inputs removed")]
    ZeroDenominator { op: &'static str },
}

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Log,
    Exp,
    Abs,
    LogSigmoid,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Var, Unary),
    Binary { a: Var, b: Var, kind: Binary, map_a: Option<Vec<usize>>, map_b: Option<Vec<usize>> },
    Affine { x: Var, scale: f64 },
    MatMul(Var, Var),
    SumAxis { x: Var, axis: usize },
    Extreme { x: Var, arg: Vec<usize> },
    Softmax { x: Var, axis: usize },
    SmoothMin { t: Var, w: Var, axis: usize, alpha: f64 },
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    Stack(Vec<Var>),
    Select { x: Var, index: usize },
    Gather { x: Var, rows: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that depends on a leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

type R = Result<Var, AutodiffError>;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = matches!(op, Op::Leaf) || inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |x| x.max(0.0),
            Unary::Sigmoid => sigmoid,
            Unary::Log => f64::ln,
            Unary::Exp => f64::exp,
            Unary::Abs => f64::abs,
            Unary::LogSigmoid => log_sigmoid,
        };
        let value = self.value(x).map(f);
        self.push(value, Op::Unary(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// `max(0, x)`; the same primitive as [`Tape::relu`].
    pub fn max_zero(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::LogSigmoid)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, kind: Binary) -> R {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| AutodiffError::Shape { op, shapes: vec![sa.clone(), sb.clone()] })?;
        let map_a = (sa != shape).then(|| broadcast_map(&shape, &sa));
        let map_b = (sb != shape).then(|| broadcast_map(&shape, &sb));
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
            Binary::Pow => f64::powf,
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let ia = map_a.as_ref().map_or(i, |m| m[i]);
                let ib = map_b.as_ref().map_or(i, |m| m[i]);
                f(va[ia], vb[ib])
            })
            .collect();
        Ok(self.push(Tensor::with_shape(shape, data), Op::Binary { a, b, kind, map_a, map_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> R {
        self.binary("add", a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> R {
        self.binary("sub", a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> R {
        self.binary("mul", a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> R {
        self.binary("div", a, b, Binary::Div)
    }

    /// `base ^ exponent` elementwise.
    pub fn pow(&mut self, base: Var, exponent: Var) -> R {
        self.binary("pow", base, exponent, Binary::Pow)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> R {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::Shape { op: "matmul", shapes: vec![sa.to_vec(), sb.to_vec()] });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out);
        Ok(self.push(Tensor::with_shape(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(), AutodiffError> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(AutodiffError::Axis { op, axis, rank });
        }
        Ok(())
    }

    fn reduced_shape(&self, x: Var, axis: usize) -> Vec<usize> {
        let mut s = self.shape(x).to_vec();
        s[axis] = 1;
        s
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> R {
        self.check_axis("sum_axis", x, axis)?;
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        let v = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += v[(o * len + j) * inner + i];
                }
            }
        }
        let shape = self.reduced_shape(x, axis);
        Ok(self.push(Tensor::with_shape(shape, out), Op::SumAxis { x, axis }, &[x]))
    }

    fn extreme(&mut self, op: &'static str, x: Var, axis: usize, max: bool) -> R {
        self.check_axis(op, x, axis)?;
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        if len == 0 {
            return Err(AutodiffError::Shape { op, shapes: vec![self.shape(x).to_vec()] });
        }
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for j in 1..len {
                    let idx = (o * len + j) * inner + i;
                    if (max && v[idx] > v[best]) || (!max && v[idx] < v[best]) {
                        best = idx;
                    }
                }
                out.push(v[best]);
                arg.push(best);
            }
        }
        let shape = self.reduced_shape(x, axis);
        Ok(self.push(Tensor::with_shape(shape, out), Op::Extreme { x, arg }, &[x]))
    }

    /// Maximum along `axis` (kept with length 1); ties go to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> R {
        self.extreme("max_axis", x, axis, true)
    }

    /// Minimum along `axis` (kept with length 1); ties go to the first index.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> R {
        self.extreme("min_axis", x, axis, false)
    }

    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> R {
        self.check_axis("softmax_axis", x, axis)?;
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        let v = self.value(x).data();
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| v[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (v[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::with_shape(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    /// Weighted smooth minimum `Σ t w e^{αt} / Σ w e^{αt}` along `axis`
    /// (kept with length 1). `t` and `w` share a shape.
    pub fn smoothmin_weighted(&mut self, t: Var, w: Var, axis: usize, alpha: f64) -> R {
        let op = "smoothmin_weighted";
        if self.shape(t) != self.shape(w) {
            return Err(AutodiffError::Shape { op, shapes: vec![self.shape(t).to_vec(), self.shape(w).to_vec()] });
        }
        self.check_axis(op, t, axis)?;
        let (outer, len, inner) = axis_split(self.shape(t), axis);
        let (tv, wv) = (self.value(t).data(), self.value(w).data());
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let (mut num, mut den) = (0.0, 0.0);
                for j in 0..len {
                    let idx = (o * len + j) * inner + i;
                    let e = wv[idx] * (alpha * tv[idx]).exp();
                    num += tv[idx] * e;
                    den += e;
                }
                if den == 0.0 {
                    return Err(AutodiffError::ZeroDenominator { op });
                }
                out.push(num / den);
            }
        }
        let shape = self.reduced_shape(t, axis);
        Ok(self.push(Tensor::with_shape(shape, out), Op::SmoothMin { t, w, axis, alpha }, &[t, w]))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> R {
        let first = xs.first().ok_or(AutodiffError::Shape { op: "concat_last", shapes: vec![] })?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        for &x in xs {
            let s = self.shape(x);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(AutodiffError::Shape {
                    op: "concat_last",
                    shapes: xs.iter().map(|&x| self.shape(x).to_vec()).collect(),
                });
            }
        }
        let rows: usize = lead.iter().product();
        let cols: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let mut shape = lead;
        shape.push(cols);
        Ok(self.push(Tensor::with_shape(shape, out), Op::Concat(xs.to_vec()), xs))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> R {
        let v = self.value(x);
        let cols = v.cols();
        if start + len > cols {
            return Err(AutodiffError::Index { op: "slice_last", index: start + len, len: cols });
        }
        let mut out = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::with_shape(shape, out), Op::Slice { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> R {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(AutodiffError::Shape { op: "reshape", shapes: vec![v.shape().to_vec(), shape.to_vec()] });
        }
        let t = Tensor::with_shape(shape.to_vec(), v.data().to_vec());
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> R {
        let first = xs.first().ok_or(AutodiffError::Shape { op: "stack", shapes: vec![] })?;
        let s = self.shape(*first).to_vec();
        if xs.iter().any(|&x| self.shape(x) != s) {
            return Err(AutodiffError::Shape {
                op: "stack",
                shapes: xs.iter().map(|&x| self.shape(x).to_vec()).collect(),
            });
        }
        let mut out = Vec::with_capacity(xs.len() * self.value(*first).len());
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![xs.len()];
        shape.extend(s);
        Ok(self.push(Tensor::with_shape(shape, out), Op::Stack(xs.to_vec()), xs))
    }

    /// Entry `index` of the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> R {
        let v = self.value(x);
        let n = *v.shape().first().unwrap_or(&0);
        if index >= n {
            return Err(AutodiffError::Index { op: "select", index, len: n });
        }
        let chunk = v.len() / n;
        let t = Tensor::with_shape(v.shape()[1..].to_vec(), v.data()[index * chunk..(index + 1) * chunk].to_vec());
        Ok(self.push(t, Op::Select { x, index }, &[x]))
    }

    /// Rows of the leading axis, in the given order and with repetition.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> R {
        let v = self.value(x);
        let n = *v.shape().first().unwrap_or(&0);
        let chunk = v.len().checked_div(n).unwrap_or(0);
        let mut out = Vec::with_capacity(rows.len() * chunk);
        for &r in rows {
            if r >= n {
                return Err(AutodiffError::Index { op: "gather_rows", index: r, len: n });
            }
            out.extend_from_slice(&v.data()[r * chunk..(r + 1) * chunk]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows.len();
        Ok(self.push(Tensor::with_shape(shape, out), Op::Gather { x, rows: rows.to_vec() }, &[x]))
    }

    /// Gradients of the scalar `out` with respect to every node it reaches.
    pub fn backward(&self, out: Var) -> Result<Gradients, AutodiffError> {
        let shape = self.shape(out);
        if self.value(out).len() != 1 {
            return Err(AutodiffError::NotScalar { shape: shape.to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::with_shape(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, kind) => {
                let xv = nodes[x.0].value.data();
                let Some(gx) = acc!(*x) else { return };
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Relu => f64::from(xv[i] > 0.0),
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Log => 1.0 / xv[i],
                        Unary::Exp => y[i],
                        Unary::Abs => {
                            if xv[i] > 0.0 {
                                1.0
                            } else if xv[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::LogSigmoid => sigmoid(-xv[i]),
                    };
                    gx[i] += g[i] * d;
                }
            }
            Op::Binary { a, b, kind, map_a, map_b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
                if let Some(ga) = acc!(*a) {
                    for i in 0..g.len() {
                        let (x, w) = (av[ia(i)], bv[ib(i)]);
                        let d = match kind {
                            Binary::Add | Binary::Sub => 1.0,
                            Binary::Mul => w,
                            Binary::Div => 1.0 / w,
                            Binary::Pow => {
                                if w == 0.0 {
                                    0.0
                                } else {
                                    w * x.max(POW_EPS).powf(w - 1.0)
                                }
                            }
                        };
                        ga[ia(i)] += g[i] * d;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..g.len() {
                        let (x, w) = (av[ia(i)], bv[ib(i)]);
                        let d = match kind {
                            Binary::Add => 1.0,
                            Binary::Sub => -1.0,
                            Binary::Mul => x,
                            Binary::Div => -x / (w * w),
                            Binary::Pow => y[i] * x.max(POW_EPS).ln(),
                        };
                        gb[ib(i)] += g[i] * d;
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(gx) = acc!(*x) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += scale * b;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = acc!(*a) {
                    // dA = G Bᵀ
                    gemm(m, n, k, g, (n, 1), nodes[b.0].value.data(), (1, n), ga);
                }
                if let Some(gb) = acc!(*b) {
                    // dB = Aᵀ G
                    gemm(k, m, n, nodes[a.0].value.data(), (1, k), g, (n, 1), gb);
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                if let Some(gx) = acc!(*x) {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gx[(o * len + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Extreme { x, arg } => {
                if let Some(gx) = acc!(*x) {
                    for (i, &a) in arg.iter().enumerate() {
                        gx[a] += g[i];
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                if let Some(gx) = acc!(*x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::SmoothMin { t, w, axis, alpha } => {
                let (outer, len, inner) = axis_split(nodes[t.0].value.shape(), *axis);
                let (tv, wv) = (nodes[t.0].value.data(), nodes[w.0].value.data());
                let mut dt = vec![0.0; tv.len()];
                let mut dw = vec![0.0; tv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let s = y[o * inner + i];
                        let den: f64 = (0..len).map(|j| wv[at(j)] * (alpha * tv[at(j)]).exp()).sum();
                        let go = g[o * inner + i];
                        for j in 0..len {
                            let ex = (alpha * tv[at(j)]).exp();
                            let diff = tv[at(j)] - s;
                            dt[at(j)] = go * wv[at(j)] * ex / den * (1.0 + alpha * diff);
                            dw[at(j)] = go * ex * diff / den;
                        }
                    }
                }
                if let Some(gt) = acc!(*t) {
                    for (a, b) in gt.iter_mut().zip(&dt) {
                        *a += b;
                    }
                }
                if let Some(gw) = acc!(*w) {
                    for (a, b) in gw.iter_mut().zip(&dw) {
                        *a += b;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = acc!(*x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|a| *a += s);
                }
            }
            Op::Concat(xs) => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for x in xs {
                    let c = nodes[x.0].value.cols();
                    if let Some(gx) = acc!(*x) {
                        for r in 0..rows {
                            for j in 0..c {
                                gx[r * c + j] += g[r * cols + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let cols = nodes[x.0].value.cols();
                let len = node.value.cols();
                if let Some(gx) = acc!(*x) {
                    for r in 0..node.value.rows() {
                        for j in 0..len {
                            gx[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::Stack(xs) => {
                let chunk = g.len() / xs.len();
                for (k, x) in xs.iter().enumerate() {
                    if let Some(gx) = acc!(*x) {
                        for (a, b) in gx.iter_mut().zip(&g[k * chunk..(k + 1) * chunk]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Select { x, index } => {
                let chunk = g.len();
                if let Some(gx) = acc!(*x) {
                    for (a, b) in gx[index * chunk..(index + 1) * chunk].iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::Gather { x, rows } => {
                let chunk = if rows.is_empty() { 0 } else { g.len() / rows.len() };
                if let Some(gx) = acc!(*x) {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..chunk {
                            gx[r * chunk + j] += g[k * chunk + j];
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

/// `c += a × b` for row-major buffers with the given (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe views that lie within `a`, `b` and `c`,
    // whose lengths the callers derive from the same dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
