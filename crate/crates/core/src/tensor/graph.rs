//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation in execution order. Each node keeps its
//! forward value; [`Graph::backward`] walks the nodes in exact reverse order and
//! accumulates adjoints additively, so a value used twice receives the sum of
//! both path contributions. All reductions run left to right.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::{matmul_into, transpose_data, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
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
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Artanh,
    Square,
    Sqrt,
    Log,
    Exp,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    Offset(Var),
    Reduce(ReduceOp, Var, Option<usize>),
    SoftmaxRows(Var),
    LogSumExp(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Option<Vec<bool>>,
    },
    RowNorms(Var),
    SelectRows(Var, Vec<usize>),
    ExpandCols(Var),
    ExpandRows(Var),
    ConcatCols(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if no path from the loss reached it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, zero-filled when unreached.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric(alloc::format!(
            "{op} produced non-finite value {} at {i}",
            data[i]
        ))),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => Vec::new(),
            Op::Matmul(a, b) | Op::Binary(_, a, b) | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Reduce(_, a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSumExp(a, _)
            | Op::RowNorms(a)
            | Op::SelectRows(a, _)
            | Op::ExpandCols(a)
            | Op::ExpandRows(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", value.data())?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
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

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a))
    }

    /// Elementwise binary op. Shapes must be equal, or one side must hold a
    /// single element which is broadcast.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        // A one-element operand broadcasts; between two of them the higher
        // rank wins so `[1] op []` stays `[1]`.
        let shape = if va.shape() == vb.shape() || (vb.len() == 1 && (va.len() != 1 || vb.shape().is_empty())) {
            va.shape().to_vec()
        } else if va.len() == 1 {
            vb.shape().to_vec()
        } else {
            return Err(Error::dim(binary_name(op), va.shape(), vb.shape()));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (at(da, i), at(db, i));
            out.push(match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => {
                    if y == 0.0 {
                        return Err(Error::Domain {
                            op: "div",
                            index: i,
                            value: y,
                        });
                    }
                    x / y
                }
                BinaryOp::Min => {
                    if y < x {
                        y
                    } else {
                        x
                    }
                }
                BinaryOp::Max => {
                    if y > x {
                        y
                    } else {
                        x
                    }
                }
            });
        }
        let out = Tensor::new(&shape, out)?;
        self.push(binary_name(op), out, Op::Binary(op, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Min, a, b)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Max, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut out = Vec::with_capacity(va.len());
        for (i, &x) in va.data().iter().enumerate() {
            let domain_err = || Error::Domain {
                op: unary_name(op),
                index: i,
                value: x,
            };
            out.push(match op {
                UnaryOp::Sigmoid => sigmoid(x),
                UnaryOp::Tanh => libm::tanh(x),
                UnaryOp::Artanh => {
                    if !(x > -1.0 && x < 1.0) {
                        return Err(domain_err());
                    }
                    libm::atanh(x)
                }
                UnaryOp::Square => x * x,
                UnaryOp::Sqrt => {
                    if x < 0.0 {
                        return Err(domain_err());
                    }
                    libm::sqrt(x)
                }
                UnaryOp::Log => {
                    if x <= 0.0 {
                        return Err(domain_err());
                    }
                    libm::log(x)
                }
                UnaryOp::Exp => libm::exp(x),
                UnaryOp::Neg => -x,
            });
        }
        let out = Tensor::new(va.shape(), out)?;
        self.push(unary_name(op), out, Op::Unary(op, a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn artanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Artanh, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    /// `a * k` for a constant `k`.
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * k).collect();
        let out = Tensor::new(self.shape(a), out)?;
        self.push("scale", out, Op::Scale(a, k))
    }

    /// `a + k` for a constant `k`.
    pub fn offset(&mut self, a: Var, k: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x + k).collect();
        let out = Tensor::new(self.shape(a), out)?;
        self.push("offset", out, Op::Offset(a))
    }

    /// Reduction over one axis (removing it) or over everything (rank-0 result).
    /// `Max` routes its adjoint to the first maximal entry.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, va.len(), 1, Vec::new()),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::dim("reduce", &shape, &[ax]));
                }
                let (o, l, i) = outer_inner(&shape, ax);
                let mut s = shape.clone();
                s.remove(ax);
                (o, l, i, s)
            }
        };
        if len == 0 {
            return Err(Error::dim("reduce", &shape, &[0]));
        }
        let d = va.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| d[(o * len + k) * inner + i];
                let v = match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut s = 0.0;
                        for k in 0..len {
                            s += at(k);
                        }
                        if op == ReduceOp::Mean {
                            s / len as f64
                        } else {
                            s
                        }
                    }
                    ReduceOp::Max => {
                        let mut m = at(0);
                        for k in 1..len {
                            if at(k) > m {
                                m = at(k);
                            }
                        }
                        m
                    }
                };
                out.push(v);
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        self.push("reduce", out, Op::Reduce(op, a, axis))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, None)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, Some(axis))
    }

    /// Row-wise softmax of a matrix, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("softmax_rows", a)?;
        let va = self.value(a);
        check_finite("softmax_rows input", va.data())?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&va.data()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let out = Tensor::matrix(m, n, out)?;
        self.push("softmax_rows", out, Op::SoftmaxRows(a))
    }

    /// Stable `log(sum(exp(x)))` along `axis` of a matrix; the axis is removed.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("logsumexp", a)?;
        if axis > 1 {
            return Err(Error::dim("logsumexp", &[m, n], &[axis]));
        }
        let d = self.value(a).data();
        let (outer, len) = if axis == 1 { (m, n) } else { (n, m) };
        let at = |o: usize, k: usize| {
            if axis == 1 {
                d[o * n + k]
            } else {
                d[k * n + o]
            }
        };
        let mut out = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..len {
                mx = f64::max(mx, at(o, k));
            }
            let mut s = 0.0;
            for k in 0..len {
                s += libm::exp(at(o, k) - mx);
            }
            out.push(mx + libm::log(s));
        }
        let out = Tensor::vector(out);
        self.push("logsumexp", out, Op::LogSumExp(a, axis))
    }

    /// Normalizes the last axis to zero mean and unit population variance, then
    /// applies `gain` and `bias` (both of length `d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Validation("layer_norm eps must be positive".to_string()));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", &shape, &[1]))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gain)));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let rows = vx.len() / d.max(1);
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let (mean, rstd) = row_stats(row, eps);
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(&shape, out)?;
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias, eps })
    }

    /// Mean over rows of `-log softmax(logits)[target]`. Masked positions act as
    /// logits of `-inf`; a target may not be masked.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (m, n) = self.matrix_dims("cross_entropy_rows", logits)?;
        if targets.len() != m {
            return Err(Error::dim("cross_entropy_rows", &[m, n], &[targets.len()]));
        }
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(Error::dim("cross_entropy_rows mask", &[m, n], &[mk.len()]));
            }
        }
        let d = self.value(logits).data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::Index {
                    op: "cross_entropy_rows",
                    index: t,
                    bound: n,
                });
            }
            let masked = |j: usize| mask.is_some_and(|mk| mk[i * n + j]);
            if masked(t) {
                return Err(Error::Validation(alloc::format!(
                    "cross_entropy_rows: target {t} of row {i} is masked"
                )));
            }
            let row = &d[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for (j, &z) in row.iter().enumerate() {
                if !masked(j) {
                    mx = f64::max(mx, z);
                }
            }
            let mut s = 0.0;
            for (j, &z) in row.iter().enumerate() {
                if !masked(j) {
                    s += libm::exp(z - mx);
                }
            }
            total += mx + libm::log(s) - row[t];
        }
        let out = Tensor::scalar(total / m as f64);
        self.push(
            "cross_entropy_rows",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.map(|mk| mk.to_vec()),
            },
        )
    }

    /// Euclidean norm of each row of a matrix, shape `[m]`. The adjoint at a
    /// zero row is taken as zero.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("row_norms", a)?;
        let d = self.value(a).data();
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let mut s = 0.0;
                for &x in &d[i * n..(i + 1) * n] {
                    s += x * x;
                }
                libm::sqrt(s)
            })
            .collect();
        self.push("row_norms", Tensor::vector(out), Op::RowNorms(a))
    }

    /// Gathers matrix rows by index; adjoints scatter-add back.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("select_rows", a)?;
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::Index {
                    op: "select_rows",
                    index: i,
                    bound: m,
                });
            }
            out.extend_from_slice(&d[i * n..(i + 1) * n]);
        }
        let out = Tensor::matrix(indices.len(), n, out)?;
        self.push("select_rows", out, Op::SelectRows(a, indices.to_vec()))
    }

    /// Repeats an `[m]` or `[m x 1]` column across `n` columns.
    pub fn expand_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let m = match s.as_slice() {
            [m] | [m, 1] => *m,
            _ => return Err(Error::dim("expand_cols", &s, &[0, 1])),
        };
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(m * n);
        for &v in d.iter().take(m) {
            out.extend(core::iter::repeat_n(v, n));
        }
        let out = Tensor::matrix(m, n, out)?;
        self.push("expand_cols", out, Op::ExpandCols(a))
    }

    /// Repeats an `[n]` or `[1 x n]` row down `m` rows.
    pub fn expand_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = match s.as_slice() {
            [n] | [1, n] => *n,
            _ => return Err(Error::dim("expand_rows", &s, &[1, 0])),
        };
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&d[..n]);
        }
        let out = Tensor::matrix(m, n, out)?;
        self.push("expand_rows", out, Op::ExpandRows(a))
    }

    /// Feature-axis concatenation `[a | b]` of two matrices with equal rows.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.matrix_dims("concat_cols", a)?;
        let (mb, nb) = self.matrix_dims("concat_cols", b)?;
        if ma != mb {
            return Err(Error::dim("concat_cols", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            out.extend_from_slice(&da[i * na..(i + 1) * na]);
            out.extend_from_slice(&db[i * nb..(i + 1) * nb]);
        }
        let out = Tensor::matrix(ma, na + nb, out)?;
        self.push("concat_cols", out, Op::ConcatCols(a, b))
    }

    /// Backpropagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(*a) {
                    let bt = transpose_data(vb.data(), k, n);
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut ga, m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let at = transpose_data(va.data(), m, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_into(&at, g, &mut gb, k, m, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                self.accumulate(grads, *a, transpose_data(g, n, m));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Binary(op, a, b) => self.propagate_binary(*op, *a, *b, g, grads),
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = (0..g.len())
                    .map(|i| {
                        g[i] * match op {
                            UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryOp::Tanh => 1.0 - y[i] * y[i],
                            UnaryOp::Artanh => 1.0 / (1.0 - x[i] * x[i]),
                            UnaryOp::Square => 2.0 * x[i],
                            UnaryOp::Sqrt => 0.5 / y[i],
                            UnaryOp::Log => 1.0 / x[i],
                            UnaryOp::Exp => y[i],
                            UnaryOp::Neg => -1.0,
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.iter().map(|v| v * k).collect()),
            Op::Offset(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Reduce(op, a, axis) => {
                let va = self.value(*a);
                let (outer, len, inner) = match axis {
                    None => (1, va.len(), 1),
                    Some(ax) => outer_inner(va.shape(), *ax),
                };
                let d = va.data();
                let mut ga = vec![0.0; va.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let go = g[o * inner + i];
                        let pos = |k: usize| (o * len + k) * inner + i;
                        match op {
                            ReduceOp::Sum => (0..len).for_each(|k| ga[pos(k)] = go),
                            ReduceOp::Mean => {
                                (0..len).for_each(|k| ga[pos(k)] = go / len as f64)
                            }
                            ReduceOp::Max => {
                                let mut best = 0;
                                for k in 1..len {
                                    if d[pos(k)] > d[pos(best)] {
                                        best = k;
                                    }
                                }
                                ga[pos(best)] = go;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let n = self.shape(*a)[1];
                let mut ga = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += yr[j] * gr[j];
                    }
                    for j in 0..n {
                        ga[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSumExp(a, axis) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                let d = self.value(*a).data();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let o = if *axis == 1 { i } else { j };
                        ga[i * n + j] = g[o] * libm::exp(d[i * n + j] - y[o]);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = self.value(*x).data();
                let vg = self.value(*gain).data();
                let d = vg.len();
                let rows = vx.len() / d;
                let mut gx = vec![0.0; vx.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut gxhat = vec![0.0; d];
                for r in 0..rows {
                    let row = &vx[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mean, rstd) = row_stats(row, *eps);
                    let (mut sum_gxh, mut sum_gxh_xh) = (0.0, 0.0);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        gxhat[j] = gr[j] * vg[j];
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                        sum_gxh += gxhat[j];
                        sum_gxh_xh += gxhat[j] * xhat[j];
                    }
                    let (mg, mgx) = (sum_gxh / d as f64, sum_gxh_xh / d as f64);
                    for j in 0..d {
                        gx[r * d + j] = rstd * (gxhat[j] - mg - xhat[j] * mgx);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, gg);
                self.accumulate(grads, *bias, gb);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                let s = self.shape(*logits);
                let (m, n) = (s[0], s[1]);
                let d = self.value(*logits).data();
                let masked = |i: usize, j: usize| mask.as_ref().is_some_and(|mk| mk[i * n + j]);
                let mut ga = vec![0.0; m * n];
                let scale = g[0] / m as f64;
                for (i, &t) in targets.iter().enumerate() {
                    let row = &d[i * n..(i + 1) * n];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..n {
                        if !masked(i, j) {
                            mx = f64::max(mx, row[j]);
                        }
                    }
                    let mut z = 0.0;
                    for j in 0..n {
                        if !masked(i, j) {
                            z += libm::exp(row[j] - mx);
                        }
                    }
                    for j in 0..n {
                        if !masked(i, j) {
                            let p = libm::exp(row[j] - mx) / z;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            ga[i * n + j] = scale * (p - onehot);
                        }
                    }
                }
                self.accumulate(grads, *logits, ga);
            }
            Op::RowNorms(a) => {
                let va = self.value(*a);
                let n = va.shape()[1];
                let d = va.data();
                let mut ga = vec![0.0; d.len()];
                for (i, &norm) in y.iter().enumerate() {
                    if norm > 0.0 {
                        for j in 0..n {
                            ga[i * n + j] = g[i] * d[i * n + j] / norm;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SelectRows(a, indices) => {
                let s = self.shape(*a);
                let n = s[1];
                let mut ga = vec![0.0; s[0] * n];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..n {
                        ga[i * n + j] += g[r * n + j];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ExpandCols(a) => {
                let m = self.value(*a).len();
                let n = g.len() / m.max(1);
                let ga = (0..m)
                    .map(|i| g[i * n..(i + 1) * n].iter().sum())
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::ExpandRows(a) => {
                let n = self.value(*a).len();
                let mut ga = vec![0.0; n];
                for r in 0..g.len() / n.max(1) {
                    for j in 0..n {
                        ga[j] += g[r * n + j];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let (na, nb) = (self.shape(*a)[1], self.shape(*b)[1]);
                let m = g.len() / (na + nb);
                let mut ga = Vec::with_capacity(m * na);
                let mut gb = Vec::with_capacity(m * nb);
                for i in 0..m {
                    let r = &g[i * (na + nb)..(i + 1) * (na + nb)];
                    ga.extend_from_slice(&r[..na]);
                    gb.extend_from_slice(&r[na..]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
        }
    }

    fn propagate_binary(
        &self,
        op: BinaryOp,
        a: Var,
        b: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let mut ga = vec![0.0; da.len()];
        let mut gb = vec![0.0; db.len()];
        let slot = |d: &[f64], i: usize| if d.len() == 1 { 0 } else { i };
        for i in 0..g.len() {
            let (x, y) = (at(da, i), at(db, i));
            let (dx, dy) = match op {
                BinaryOp::Add => (1.0, 1.0),
                BinaryOp::Sub => (1.0, -1.0),
                BinaryOp::Mul => (y, x),
                BinaryOp::Div => (1.0 / y, -x / (y * y)),
                // Ties route to the first operand.
                BinaryOp::Min => {
                    if y < x {
                        (0.0, 1.0)
                    } else {
                        (1.0, 0.0)
                    }
                }
                BinaryOp::Max => {
                    if y > x {
                        (0.0, 1.0)
                    } else {
                        (1.0, 0.0)
                    }
                }
            };
            ga[slot(da, i)] += g[i] * dx;
            gb[slot(db, i)] += g[i] * dy;
        }
        self.accumulate(grads, a, ga);
        self.accumulate(grads, b, gb);
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mut mean = 0.0;
    for &v in row {
        mean += v;
    }
    mean /= d;
    let mut var = 0.0;
    for &v in row {
        var += (v - mean) * (v - mean);
    }
    var /= d;
    (mean, 1.0 / libm::sqrt(var + eps))
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for &z in row {
        mx = f64::max(mx, z);
    }
    let mut s = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = libm::exp(z - mx);
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn binary_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
        BinaryOp::Min => "min",
        BinaryOp::Max => "max",
    }
}

fn unary_name(op: UnaryOp) -> &'static str {
    match op {
        UnaryOp::Sigmoid => "sigmoid",
        UnaryOp::Tanh => "tanh",
        UnaryOp::Artanh => "artanh",
        UnaryOp::Square => "square",
        UnaryOp::Sqrt => "sqrt",
        UnaryOp::Log => "log",
        UnaryOp::Exp => "exp",
        UnaryOp::Neg => "neg",
    }
}
