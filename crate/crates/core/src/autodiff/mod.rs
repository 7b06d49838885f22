//! A small reverse-mode differentiation engine over dense f64 tensors.
//!
//! Operations are recorded on a [`Tape`] in execution order and addressed
//! through [`Var`] handles. [`Tape::backward`] walks the tape once in
//! reverse and returns a [`Gradients`] table holding `∂loss/∂leaf` for every
//! leaf that was created with `requires_grad`.
//!
//! The op set is exactly what the matcher needs. Broadcasting is limited to
//! per-channel (trailing axis) bias and scale.

mod kernels;
mod ops;

pub use kernels::{log_sum_exp, matmul, matmul_nt, matmul_set, set_sum};
pub use ops::{channel_stats, sigmoid, PROB_FLOOR};

use crate::error::{Error, Result};

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used to show that the gradient
/// checker notices a broken derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// LeakyReLU backward passes the incoming gradient unchanged on the
    /// negative side instead of scaling it by the slope.
    LeakyReluSlope,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    MulChannel { x: Var, scale: Var },
    Concat { parts: Vec<Var> },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid(Var),
    Normalize { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
        len: usize,
        inner: usize,
    },
    Gather { x: Var, idx: Vec<usize> },
    Reshape(Var),
    PairwiseDist { a: Var, b: Var },
    Dustbins { cost: Var, alpha: Var },
    Sinkhorn {
        scores: Var,
        trace: crate::transport::SinkhornTrace,
    },
    Sum(Var),
    MatchingNll { plan: Var, cells: Vec<usize> },
    WeightedBce {
        probs: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` is unreachable from the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(shape),
        }
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
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
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = &self.nodes[loss.0].value.shape;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        self.accumulate(grads, v, |s| {
            for (a, b) in s.iter_mut().zip(g) {
                *a += b;
            }
        });
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, .. } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (rows, inner) = (av.rows(), av.cols());
                let cols = bv.cols();
                self.accumulate(grads, *a, |s| {
                    kernels::matmul_nt_acc(g, &bv.data, rows, cols, inner, s)
                });
                self.accumulate(grads, *b, |s| {
                    kernels::matmul_tn_acc(&av.data, g, rows, inner, cols, s)
                });
            }
            Op::MatMulNt { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (rows, inner) = (av.rows(), av.cols());
                let other = bv.rows();
                // ga = g · b ; gb = gᵀ · a
                self.accumulate(grads, *a, |s| {
                    let r = kernels::matmul(g, &bv.data, rows, other, inner);
                    s.iter_mut().zip(r).for_each(|(x, y)| *x += y);
                });
                self.accumulate(grads, *b, |s| {
                    kernels::matmul_tn_acc(g, &av.data, rows, other, inner, s)
                });
            }
            Op::Add(a, b) => {
                self.add_into(grads, *a, g);
                self.add_into(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, g);
                self.accumulate(grads, *b, |s| {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                });
            }
            Op::Mul(a, b) => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                self.accumulate(grads, *a, |s| {
                    for ((x, gv), b) in s.iter_mut().zip(g).zip(bv) {
                        *x += gv * b;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((x, gv), a) in s.iter_mut().zip(g).zip(av) {
                        *x += gv * a;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |s| {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                });
            }
            Op::AddBias { x, bias } => {
                self.add_into(grads, *x, g);
                let cols = out.cols();
                self.accumulate(grads, *bias, |s| {
                    for row in g.chunks_exact(cols) {
                        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::MulChannel { x, scale } => {
                let cols = out.cols();
                let xv = &self.value(*x).data;
                let sv = &self.value(*scale).data;
                self.accumulate(grads, *x, |s| {
                    for (srow, grow) in s.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                        for c in 0..cols {
                            srow[c] += grow[c] * sv[c];
                        }
                    }
                });
                self.accumulate(grads, *scale, |s| {
                    for (xrow, grow) in xv.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        for c in 0..cols {
                            s[c] += grow[c] * xrow[c];
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.accumulate(grads, *p, |s| {
                        for (srow, grow) in s.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            srow.iter_mut()
                                .zip(&grow[offset..offset + w])
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += w;
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &self.value(*x).data;
                let neg = if self.fault == Some(Fault::LeakyReluSlope) {
                    1.0
                } else {
                    *slope
                };
                self.accumulate(grads, *x, |s| {
                    for ((a, gv), xv) in s.iter_mut().zip(g).zip(xv) {
                        *a += if *xv > 0.0 { *gv } else { neg * gv };
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, |s| {
                    for ((a, gv), y) in s.iter_mut().zip(g).zip(&out.data) {
                        *a += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Normalize { x, inv_std } => {
                // dx = inv_std * (g - mean(g) - y * mean(g * y)) per channel.
                let cols = out.cols();
                let rows = out.rows() as f64;
                let y = &out.data;
                let mut mean_g = vec![0.0; cols];
                let mut mean_gy = vec![0.0; cols];
                for (grow, yrow) in g.chunks_exact(cols).zip(y.chunks_exact(cols)) {
                    for c in 0..cols {
                        mean_g[c] += grow[c];
                        mean_gy[c] += grow[c] * yrow[c];
                    }
                }
                mean_g.iter_mut().for_each(|v| *v /= rows);
                mean_gy.iter_mut().for_each(|v| *v /= rows);
                self.accumulate(grads, *x, |s| {
                    for ((srow, grow), yrow) in s
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        for c in 0..cols {
                            srow[c] += inv_std[c] * (grow[c] - mean_g[c] - yrow[c] * mean_gy[c]);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = out.cols();
                self.accumulate(grads, *x, |s| {
                    for ((srow, grow), yrow) in s
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(out.data.chunks_exact(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            srow[c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                });
            }
            Op::MaxAxis {
                x,
                argmax,
                len,
                inner,
            } => {
                self.accumulate(grads, *x, |s| {
                    for (k, (&am, gv)) in argmax.iter().zip(g).enumerate() {
                        let o = k / inner;
                        let c = k % inner;
                        s[(o * len + am) * inner + c] += gv;
                    }
                });
            }
            Op::Gather { x, idx } => {
                let cols = out.cols();
                self.accumulate(grads, *x, |s| {
                    for (grow, &r) in g.chunks_exact(cols).zip(idx) {
                        s[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Reshape(x) => self.add_into(grads, *x, g),
            Op::PairwiseDist { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, d) = (av.rows(), av.cols());
                let n = bv.rows();
                let mut ga = vec![0.0; m * d];
                let mut gb = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let dist = out.data[i * n + j];
                        if dist <= 0.0 {
                            continue;
                        }
                        let w = g[i * n + j] / dist;
                        for c in 0..d {
                            let diff = av.data[i * d + c] - bv.data[j * d + c];
                            ga[i * d + c] += w * diff;
                            gb[j * d + c] -= w * diff;
                        }
                    }
                }
                self.add_into(grads, *a, &ga);
                self.add_into(grads, *b, &gb);
            }
            Op::Dustbins { cost, alpha } => {
                let cols = out.cols();
                let (m, n) = (out.rows() - 1, cols - 1);
                self.accumulate(grads, *cost, |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] -= g[i * cols + j];
                        }
                    }
                });
                self.accumulate(grads, *alpha, |s| {
                    let mut acc = 0.0;
                    for i in 0..=m {
                        acc += g[i * cols + n];
                    }
                    for j in 0..n {
                        acc += g[m * cols + j];
                    }
                    s[0] += acc;
                });
            }
            Op::Sinkhorn { scores, trace } => {
                let sv = self.value(*scores);
                let gz = crate::transport::sinkhorn_backward(sv, trace, &out.data, g);
                self.add_into(grads, *scores, &gz);
            }
            Op::Sum(x) => {
                let gv = g[0];
                self.accumulate(grads, *x, |s| s.iter_mut().for_each(|a| *a += gv));
            }
            Op::MatchingNll { plan, cells } => {
                let pv = &self.value(*plan).data;
                let scale = g[0] / cells.len() as f64;
                self.accumulate(grads, *plan, |s| {
                    for &c in cells {
                        if pv[c] > ops::PROB_FLOOR {
                            s[c] -= scale / pv[c];
                        }
                    }
                });
            }
            Op::WeightedBce {
                probs,
                labels,
                weights,
            } => {
                let pv = &self.value(*probs).data;
                let n = pv.len() as f64;
                self.accumulate(grads, *probs, |s| {
                    for k in 0..pv.len() {
                        let p = pv[k];
                        let y = labels[k];
                        let mut d = 0.0;
                        if p > ops::PROB_FLOOR {
                            d -= y / p;
                        }
                        if 1.0 - p > ops::PROB_FLOOR {
                            d += (1.0 - y) / (1.0 - p);
                        }
                        s[k] += g[0] * weights[k] * d / n;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests;
