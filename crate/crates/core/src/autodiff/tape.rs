//! Reverse-mode differentiation over a linear tape.
//!
//! Every op evaluates eagerly and appends a node holding its value and the
//! handles of its inputs. `backward` replays the nodes in reverse order and
//! accumulates vector-Jacobian products into the inputs that track gradients.
//!
//! Shape errors inside graph construction are programming errors and panic;
//! user-facing entry points validate their inputs before touching the tape.

use std::fmt;

use super::tensor::{gemm, Tensor};
use crate::error::{IdacError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op with a hand-written backward pass, for fused kernels that would be
/// wasteful to express through the primitives.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product for each input. `None` marks an input that
    /// receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softplus(Var),
    Relu(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MaxAll(Var, usize),
    LogSumExpRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherFlat(Var, Vec<usize>),
    Reshape(Var),
    GaussianLogPdfRows(Var, Var, Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when no tracked path reaches it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but materializes zeros for untouched nodes.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], |g| g.to_vec())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
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

    /// A tracked leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Forward identity that blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Leaf, false)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(src.rows(), src.cols(), data);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(
            (x.rows(), x.cols()),
            (y.rows(), y.cols()),
            "elementwise op on mismatched shapes"
        );
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::from_parts(x.rows(), x.cols(), data);
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |p, q| p / q)
    }

    /// Adds the single row `b` (`[1, m]`) to every row of `a` (`[n, m]`).
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, r) = (self.value(a), self.value(b));
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(x.cols(), r.cols(), "add_row width mismatch");
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            for (v, &bias) in row.iter_mut().zip(r.data()) {
                *v += bias;
            }
        }
        let value = Tensor::from_parts(x.rows(), cols, data);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::AddRow(a, b), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let (n, k, m) = (x.rows(), x.cols(), y.cols());
        assert_eq!(k, y.rows(), "matmul inner dimensions differ");
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, x.data(), false, y.data(), false, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(n, m, out), Op::MatMul(a, b), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.map(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Row sums: `[n, m] -> [n, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let value = Tensor::from_parts(t.rows(), 1, data);
        let rg = self.rg(&[a]);
        self.push(value, Op::SumCols(a), rg)
    }

    /// Maximum over all entries; the gradient goes to the first maximizer.
    pub fn max(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (idx, best) = t
            .data()
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(best), Op::MaxAll(a, idx), rg)
    }

    /// Row-wise `log Σ exp`: `[n, m] -> [n, 1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = (0..t.rows()).map(|r| logsumexp(t.row_slice(r))).collect();
        let value = Tensor::from_parts(t.rows(), 1, data);
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSumExpRows(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_cols(&tensors).expect("concat_cols: row counts differ");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let t = self.value(a);
        assert!(start + width <= t.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(t.rows() * width);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..start + width]);
        }
        let value = Tensor::from_parts(t.rows(), width, data);
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Output row `i` is input row `indices[i]`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let value = self.value(a).select_rows(&indices);
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, indices), rg)
    }

    /// Output element `i` is input element `indices[i]` (flat, row-major),
    /// laid out as `[rows, cols]`.
    pub fn gather_flat(&mut self, a: Var, indices: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(indices.len(), rows * cols, "gather_flat output shape");
        let src = self.value(a).data();
        let data = indices.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(rows, cols, data), Op::GatherFlat(a, indices), rg)
    }

    /// Sorts each row ascending. Ties keep their input order; the gradient
    /// follows the chosen permutation.
    pub fn sort_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut indices = Vec::with_capacity(rows * cols);
        let mut perm: Vec<usize> = Vec::with_capacity(cols);
        for r in 0..rows {
            let row = t.row_slice(r);
            perm.clear();
            perm.extend(0..cols);
            perm.sort_by(|&i, &j| row[i].total_cmp(&row[j]));
            indices.extend(perm.iter().map(|&c| r * cols + c));
        }
        self.gather_flat(a, indices, rows, cols)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshape(rows, cols)
            .expect("reshape changes element count");
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Row-wise log-density of independent Gaussians:
    /// `Σ_d log N(x_d; mu_d, sigma_d²)`, giving `[n, 1]`.
    pub fn gaussian_log_pdf_rows(&mut self, x: Var, mu: Var, sigma: Var) -> Var {
        let (xt, mt, st) = (self.value(x), self.value(mu), self.value(sigma));
        assert_eq!(xt.shape(), mt.shape(), "gaussian_log_pdf: x/mu shape");
        assert_eq!(xt.shape(), st.shape(), "gaussian_log_pdf: x/sigma shape");
        let data: Vec<f64> = (0..xt.rows())
            .map(|r| gaussian_log_pdf(xt.row_slice(r), mt.row_slice(r), st.row_slice(r)))
            .collect();
        let value = Tensor::from_parts(xt.rows(), 1, data);
        let rg = self.rg(&[x, mu, sigma]);
        self.push(value, Op::GaussianLogPdfRows(x, mu, sigma), rg)
    }

    /// Appends a node computed outside the tape with a custom backward pass.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], value: Tensor) -> Var {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom(op, inputs.to_vec()), rg)
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = loss.0 + 1;
        if self.value(loss).len() != 1 {
            return Err(IdacError::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if let Some(slot) = self.slot(grads, v) {
            for (i, (s, &gi)) in slot.iter_mut().zip(g).enumerate() {
                *s += f(i, gi);
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |_, gi| gi);
                self.acc_map(grads, *b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |_, gi| gi);
                self.acc_map(grads, *b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, g, |k, gi| gi * y[k]);
                self.acc_map(grads, *b, g, |k, gi| gi * x[k]);
            }
            Op::Div(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, g, |k, gi| gi / y[k]);
                self.acc_map(grads, *b, g, |k, gi| -gi * x[k] / (y[k] * y[k]));
            }
            Op::AddRow(a, b) => {
                self.acc_map(grads, *a, g, |_, gi| gi);
                let cols = node.value.cols();
                if let Some(slot) = self.slot(grads, *b) {
                    for row in g.chunks(cols.max(1)) {
                        for (s, &gi) in slot.iter_mut().zip(row) {
                            *s += gi;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (n, k, m) = (x.rows(), x.cols(), y.cols());
                if let Some(slot) = self.slot(grads, *a) {
                    // dA = G · Bᵀ
                    gemm(n, m, k, g, false, y.data(), true, 1.0, slot);
                }
                if let Some(slot) = self.slot(grads, *b) {
                    // dB = Aᵀ · G
                    gemm(k, n, m, x.data(), true, g, false, 1.0, slot);
                }
            }
            Op::Neg(a) => self.acc_map(grads, *a, g, |_, gi| -gi),
            Op::Scale(a, c) => self.acc_map(grads, *a, g, |_, gi| c * gi),
            Op::AddScalar(a) => self.acc_map(grads, *a, g, |_, gi| gi),
            Op::Exp(a) => self.acc_map(grads, *a, g, |k, gi| gi * out[k]),
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc_map(grads, *a, g, |k, gi| gi / x[k]);
            }
            Op::Tanh(a) => self.acc_map(grads, *a, g, |k, gi| gi * (1.0 - out[k] * out[k])),
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                self.acc_map(grads, *a, g, |k, gi| gi * sigmoid(x[k]));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc_map(grads, *a, g, |k, gi| if x[k] > 0.0 { gi } else { 0.0 });
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.acc_map(grads, *a, g, |k, gi| 2.0 * x[k] * gi);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                self.acc_map(grads, *a, g, |k, gi| {
                    if x[k] >= *lo && x[k] <= *hi {
                        gi
                    } else {
                        0.0
                    }
                });
            }
            Op::Sum(a) => self.acc_map(grads, *a, &vec![g[0]; self.value(*a).len()], |_, gi| gi),
            Op::Mean(a) => {
                let len = self.value(*a).len();
                let gi = g[0] / len as f64;
                self.acc_map(grads, *a, &vec![gi; len], |_, gi| gi);
            }
            Op::SumCols(a) => {
                let cols = self.value(*a).cols();
                self.acc_map(grads, *a, &vec![0.0; self.value(*a).len()], |k, _| g[k / cols]);
            }
            Op::MaxAll(a, idx) => {
                if let Some(slot) = self.slot(grads, *a) {
                    slot[*idx] += g[0];
                }
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let cols = x.cols();
                let xd = x.data();
                self.acc_map(grads, *a, &vec![0.0; xd.len()], |k, _| {
                    let r = k / cols;
                    g[r] * (xd[k] - out[r]).exp()
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(slot) = self.slot(grads, p) {
                        for (r, srow) in slot.chunks_mut(w.max(1)).enumerate() {
                            let grow = &g[r * total + offset..r * total + offset + w];
                            for (s, &gi) in srow.iter_mut().zip(grow) {
                                *s += gi;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let width = node.value.cols();
                let cols = self.value(*a).cols();
                if let Some(slot) = self.slot(grads, *a) {
                    for (r, grow) in g.chunks(width.max(1)).enumerate() {
                        let srow = &mut slot[r * cols + start..r * cols + start + width];
                        for (s, &gi) in srow.iter_mut().zip(grow) {
                            *s += gi;
                        }
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                let cols = self.value(*a).cols();
                if let Some(slot) = self.slot(grads, *a) {
                    for (r, &src) in indices.iter().enumerate() {
                        let grow = &g[r * cols..(r + 1) * cols];
                        for (s, &gi) in slot[src * cols..(src + 1) * cols].iter_mut().zip(grow) {
                            *s += gi;
                        }
                    }
                }
            }
            Op::GatherFlat(a, indices) => {
                if let Some(slot) = self.slot(grads, *a) {
                    for (&src, &gi) in indices.iter().zip(g) {
                        slot[src] += gi;
                    }
                }
            }
            Op::Reshape(a) => self.acc_map(grads, *a, g, |_, gi| gi),
            Op::GaussianLogPdfRows(x, mu, sigma) => {
                let (xt, mt, st) = (self.value(*x), self.value(*mu), self.value(*sigma));
                let cols = xt.cols();
                let (xd, md, sd) = (xt.data(), mt.data(), st.data());
                let z = |k: usize| (xd[k] - md[k]) / sd[k];
                let zeros = vec![0.0; xd.len()];
                self.acc_map(grads, *x, &zeros, |k, _| -g[k / cols] * z(k) / sd[k]);
                self.acc_map(grads, *mu, &zeros, |k, _| g[k / cols] * z(k) / sd[k]);
                self.acc_map(grads, *sigma, &zeros, |k, _| {
                    let zk = z(k);
                    g[k / cols] * (zk * zk - 1.0) / sd[k]
                });
            }
            Op::Custom(op, inputs) => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let parts = op.backward(&tensors, &node.value, g);
                for (&v, part) in inputs.iter().zip(parts) {
                    if let Some(part) = part {
                        self.acc_map(grads, v, &part, |_, gi| gi);
                    }
                }
            }
        }
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// `Σ_d log N(x_d; mu_d, sigma_d²)`.
pub fn gaussian_log_pdf(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&x, &m), &s)| {
            let z = (x - m) / s;
            -0.5 * LN_2PI - s.ln() - 0.5 * z * z
        })
        .sum()
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    softplus(x)
}
