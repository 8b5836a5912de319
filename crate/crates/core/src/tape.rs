//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its materialized output and the
//! references needed by its backward rule. Nodes are only ever appended, so the
//! tape is topologically ordered by construction and [`Tape::backward`] is a
//! single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Negate,
    Square,
    /// `ln(1 + eˣ)`, evaluated without overflow.
    Softplus,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Subtract,
    /// Hadamard product.
    Multiply,
    Divide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Reduce {
        kind: Reduce,
        input: Var,
        /// Input shape with reduced axes set to 1.
        kept: Vec<usize>,
        count: usize,
        argmax: Vec<usize>,
    },
    Softmax(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only populated on leaves.
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

fn apply_unary(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => libm::tanh(x),
        Unary::Relu => x.max(0.0),
        Unary::Negate => -x,
        Unary::Square => x * x,
        Unary::Softplus => softplus(x),
        Unary::Sqrt => libm::sqrt(x),
    }
}

/// Derivative of a unary op given its input `x` and output `y`.
fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Negate => -1.0,
        Unary::Square => 2.0 * x,
        Unary::Softplus => sigmoid(x),
        Unary::Sqrt => 0.5 / y,
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated on a leaf by previous [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ── elementwise ──────────────────────────────────────────────────────

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let out = self.value(a).map(|x| apply_unary(kind, x));
        let rg = self.rg(a);
        self.push(out, Op::Unary(kind, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Negate, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Subtract => x - y,
            Binary::Multiply => x * y,
            Binary::Divide => x / y,
        };
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)?
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                Error::ShapeMismatch {
                    op: "elementwise",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                }
            })?;
            let sa = broadcast_strides(ta.shape(), &shape);
            let sb = broadcast_strides(tb.shape(), &shape);
            let mut data = vec![0.0; shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            Tensor::new(&shape, data)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Subtract, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Multiply, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Divide, a, b)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    // ── linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        for t in [ta, tb] {
            if t.rank() != 2 {
                return Err(Error::Rank {
                    op: "matmul",
                    expected: 2,
                    shape: t.shape().to_vec(),
                });
            }
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        if tb.shape()[0] != k {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut c = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, ta.data(), tb.data(), &mut c);
        let out = Tensor::new(&[m, n], c)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of `input` (`[C,H,W]` or `[N,C,H,W]`) with square
    /// `kernel`s of shape `[C_out,C_in,k,k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(kernel));
        let (batch, geo, c_out) = conv_geometry(x.shape(), w.shape(), stride, padding)?;
        let (ho, wo) = (geo.out_height(), geo.out_width());
        let plane = ho * wo;
        let in_len = geo.channels * geo.height * geo.width;
        let mut out = vec![0.0; batch * c_out * plane];
        let mut cols = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; geo.patch_len() * plane]
        };
        for n in 0..batch {
            let xn = &x.data()[n * in_len..(n + 1) * in_len];
            let on = &mut out[n * c_out * plane..(n + 1) * c_out * plane];
            if geo.is_pointwise() {
                kernels::gemm_nn(c_out, geo.patch_len(), plane, w.data(), xn, on);
            } else {
                kernels::im2col(&geo, xn, &mut cols);
                kernels::gemm_nn(c_out, geo.patch_len(), plane, w.data(), &cols, on);
            }
        }
        let shape: Vec<usize> = if x.rank() == 3 {
            vec![c_out, ho, wo]
        } else {
            vec![batch, c_out, ho, wo]
        };
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            rg,
        ))
    }

    // ── reductions ───────────────────────────────────────────────────────

    /// Reduces over `axes`. With `keepdim` the reduced axes stay as extent 1.
    pub fn reduce(&mut self, kind: Reduce, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        let mut kept = t.shape().to_vec();
        for (i, &ax) in axes.iter().enumerate() {
            if ax >= rank || axes[..i].contains(&ax) {
                return Err(Error::InvalidAxis { axis: ax, rank });
            }
            kept[ax] = 1;
        }
        let count: usize = axes.iter().map(|&ax| t.shape()[ax]).product();
        if count == 0 {
            return Err(Error::Empty("reduce"));
        }
        let out_len: usize = kept.iter().product();
        let init = if kind == Reduce::Max { f64::NEG_INFINITY } else { 0.0 };
        let mut out = vec![init; out_len];
        let mut argmax = Vec::new();
        if kind == Reduce::Max {
            argmax = vec![0; out_len];
        }
        let sk = broadcast_strides(&kept, t.shape());
        let own = strides(t.shape());
        let d = t.data();
        for_each_broadcast(t.shape(), &sk, &own, |i, o, _| match kind {
            Reduce::Sum | Reduce::Mean => out[o] += d[i],
            Reduce::Max => {
                if d[i] > out[o] {
                    out[o] = d[i];
                    argmax[o] = i;
                }
            }
        });
        if kind == Reduce::Mean {
            let inv = 1.0 / count as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        let shape: Vec<usize> = if keepdim {
            kept.clone()
        } else {
            t.shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &e)| e)
                .collect()
        };
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::Reduce {
                kind,
                input: a,
                kept,
                count,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(Reduce::Sum, a, &axes, false).expect("full reduction")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(Reduce::Mean, a, &axes, false)
    }

    /// Mean over the two trailing (spatial) axes: `[..., H, W] → [...]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::Rank {
                op: "global_avg_pool",
                expected: 3,
                shape: self.shape(a).to_vec(),
            });
        }
        self.reduce(Reduce::Mean, a, &[rank - 2, rank - 1], false)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 {
            return Err(Error::Rank {
                op: "softmax",
                expected: 1,
                shape: t.shape().to_vec(),
            });
        }
        if t.numel() == 0 {
            return Err(Error::Empty("softmax"));
        }
        let m = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = t.data().iter().map(|&x| libm::exp(x - m)).collect();
        let s: f64 = e.iter().sum();
        let out = Tensor::from_slice(&e.iter().map(|x| x / s).collect::<Vec<_>>());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    // ── structural ───────────────────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty("concat"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        let mut extent = 0;
        for &v in inputs {
            let s = self.shape(v);
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            extent += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        let out = Tensor::new(&shape, data)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let ext = t.shape()[axis];
        if range.start >= range.end || range.end > ext {
            return Err(Error::InvalidArgument(alloc::format!(
                "slice {}..{} out of bounds for axis {axis} of extent {ext}",
                range.start,
                range.end
            )));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let len = range.end - range.start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            data.extend_from_slice(&t.data()[base + range.start * inner..base + range.end * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::Slice {
                input: a,
                axis,
                start: range.start,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Selects entry `index` of the leading axis, dropping that axis.
    pub fn index_axis0(&mut self, a: Var, index: usize) -> Result<Var> {
        let s = self.slice(a, 0, index..index + 1)?;
        let shape = self.shape(a)[1..].to_vec();
        self.reshape(s, &shape)
    }

    /// Stacks equal-shaped values along a new leading axis.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let mut expanded = Vec::with_capacity(items.len());
        for &v in items {
            let mut shape = vec![1];
            shape.extend_from_slice(self.shape(v));
            expanded.push(self.reshape(v, &shape)?);
        }
        self.concat(&expanded, 0)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Propagates d`loss` back to every leaf that requires a gradient. Leaf
    /// gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contribution: &[f64]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => add_into(buf, contribution),
                slot @ None => *slot = Some(contribution.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gi, (&xi, &yi))| gi * unary_derivative(*kind, xi, yi))
                    .collect();
                acc(*a, &ga);
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = (ta.data(), tb.data());
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                let mut step = |o: usize, ia: usize, ib: usize| {
                    let go = g[o];
                    match kind {
                        Binary::Add => {
                            ga[ia] += go;
                            gb[ib] += go;
                        }
                        Binary::Subtract => {
                            ga[ia] += go;
                            gb[ib] -= go;
                        }
                        Binary::Multiply => {
                            ga[ia] += go * db[ib];
                            gb[ib] += go * da[ia];
                        }
                        Binary::Divide => {
                            let y = db[ib];
                            ga[ia] += go / y;
                            gb[ib] -= go * da[ia] / (y * y);
                        }
                    }
                };
                if ta.shape() == tb.shape() {
                    for o in 0..g.len() {
                        step(o, o, o);
                    }
                } else {
                    let out = node.value.shape();
                    let sa = broadcast_strides(ta.shape(), out);
                    let sb = broadcast_strides(tb.shape(), out);
                    for_each_broadcast(out, &sa, &sb, step);
                }
                acc(*a, &ga);
                acc(*b, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                acc(*a, &ga);
            }
            Op::AddScalar(a) => acc(*a, g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_nt(m, n, k, g, tb.data(), &mut ga);
                    acc(*a, &ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_tn(k, m, n, ta.data(), g, &mut gb);
                    acc(*b, &gb);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (x, w) = (self.value(*input), self.value(*kernel));
                let (batch, geo, c_out) =
                    conv_geometry(x.shape(), w.shape(), *stride, *padding).expect("validated");
                let plane = geo.out_height() * geo.out_width();
                let in_len = geo.channels * geo.height * geo.width;
                let patch = geo.patch_len();
                let want_x = self.rg(*input);
                let want_w = self.rg(*kernel);
                let mut gx = if want_x { vec![0.0; x.numel()] } else { Vec::new() };
                let mut gw = if want_w { vec![0.0; w.numel()] } else { Vec::new() };
                let pointwise = geo.is_pointwise();
                let mut cols = if pointwise { Vec::new() } else { vec![0.0; patch * plane] };
                let mut dcols = if pointwise || !want_x {
                    Vec::new()
                } else {
                    vec![0.0; patch * plane]
                };
                for n in 0..batch {
                    let xn = &x.data()[n * in_len..(n + 1) * in_len];
                    let gn = &g[n * c_out * plane..(n + 1) * c_out * plane];
                    if want_w {
                        if pointwise {
                            kernels::gemm_nt(c_out, plane, patch, gn, xn, &mut gw);
                        } else {
                            kernels::im2col(&geo, xn, &mut cols);
                            kernels::gemm_nt(c_out, plane, patch, gn, &cols, &mut gw);
                        }
                    }
                    if want_x {
                        let gxn = &mut gx[n * in_len..(n + 1) * in_len];
                        if pointwise {
                            kernels::gemm_tn(patch, c_out, plane, w.data(), gn, gxn);
                        } else {
                            dcols.fill(0.0);
                            kernels::gemm_tn(patch, c_out, plane, w.data(), gn, &mut dcols);
                            kernels::col2im(&geo, &dcols, gxn);
                        }
                    }
                }
                if want_x {
                    acc(*input, &gx);
                }
                if want_w {
                    acc(*kernel, &gw);
                }
            }
            Op::Reduce {
                kind,
                input,
                kept,
                count,
                argmax,
            } => {
                let t = self.value(*input);
                let mut ga = vec![0.0; t.numel()];
                match kind {
                    Reduce::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            ga[src] += g[o];
                        }
                    }
                    Reduce::Sum | Reduce::Mean => {
                        let s = if *kind == Reduce::Mean { 1.0 / *count as f64 } else { 1.0 };
                        let sk = broadcast_strides(kept, t.shape());
                        let own = strides(t.shape());
                        for_each_broadcast(t.shape(), &sk, &own, |i, o, _| ga[i] = g[o] * s);
                    }
                }
                acc(*input, &ga);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                let ga: Vec<f64> = y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)).collect();
                acc(*a, &ga);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * row + offset;
                            gv.extend_from_slice(&g[base..base + chunk]);
                        }
                        acc(v, &gv);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let src = self.shape(*input);
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let ext = src[*axis];
                let len = node.value.shape()[*axis];
                let mut ga = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let dst = o * ext * inner + start * inner;
                    ga[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*input, &ga);
            }
            Op::Reshape(a) => acc(*a, g),
        }
    }
}

fn conv_geometry(
    x: &[usize],
    w: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(usize, ConvGeometry, usize)> {
    let (batch, c, h, wd) = match *x {
        [c, h, wd] => (1, c, h, wd),
        [n, c, h, wd] => (n, c, h, wd),
        _ => {
            return Err(Error::Rank {
                op: "conv2d",
                expected: 3,
                shape: x.to_vec(),
            })
        }
    };
    let [c_out, c_in, kh, kw] = *w else {
        return Err(Error::Rank {
            op: "conv2d kernel",
            expected: 4,
            shape: w.to_vec(),
        });
    };
    if c_in != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    if kh != kw {
        return Err(Error::InvalidArgument(alloc::format!(
            "conv2d kernels must be square, got {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    if kh == 0 || kh > h + 2 * padding || kh > wd + 2 * padding {
        return Err(Error::KernelTooLarge {
            kernel: kh,
            height: h + 2 * padding,
            width: wd + 2 * padding,
        });
    }
    let geo = ConvGeometry {
        channels: c,
        height: h,
        width: wd,
        kernel: kh,
        stride,
        padding,
    };
    Ok((batch, geo, c_out))
}
