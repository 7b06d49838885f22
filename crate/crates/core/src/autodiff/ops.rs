use super::kernels::{self, set_sum};
use super::{Op, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn mismatch(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

impl Tape {
    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `a[..., c] · b[c, o]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product whose contraction is invariant to reordering the
    /// contracted axis; used where that axis indexes a point set.
    pub fn matmul_set(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, set: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape.len() != 2 || av.cols() != bv.shape[0] {
            return Err(mismatch("matmul", &av.shape, &bv.shape));
        }
        let (rows, inner, cols) = (av.rows(), av.cols(), bv.shape[1]);
        let data = if set {
            kernels::matmul_set(&av.data, &bv.data, rows, inner, cols)
        } else {
            kernels::matmul(&av.data, &bv.data, rows, inner, cols)
        };
        let mut shape = av.shape.clone();
        *shape.last_mut().unwrap() = cols;
        Ok(self.push(Tensor { shape, data }, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a[r, c] · b[s, c]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.cols() != bv.cols() {
            return Err(mismatch("matmul_nt", &av.shape, &bv.shape));
        }
        let (rows, inner, other) = (av.rows(), av.cols(), bv.rows());
        let data = kernels::matmul_nt(&av.data, &bv.data, rows, inner, other);
        let value = Tensor {
            shape: vec![rows, other],
            data,
        };
        Ok(self.push(value, Op::MatMulNt { a, b }, &[a, b]))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = av.shape.clone();
        self.push(Tensor { shape, data }, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v * c).collect(),
        };
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// Adds a per-channel vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let cols = xv.cols();
        if bv.len() != cols {
            return Err(mismatch("add_bias", &xv.shape, &bv.shape));
        }
        let mut data = xv.data.clone();
        for row in data.chunks_exact_mut(cols) {
            row.iter_mut().zip(&bv.data).for_each(|(a, b)| *a += b);
        }
        let shape = xv.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Multiplies every row by a per-channel vector.
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(scale));
        let cols = xv.cols();
        if sv.len() != cols {
            return Err(mismatch("mul_channel", &xv.shape, &sv.shape));
        }
        let mut data = xv.data.clone();
        for row in data.chunks_exact_mut(cols) {
            row.iter_mut().zip(&sv.data).for_each(|(a, b)| *a *= b);
        }
        let shape = xv.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::MulChannel { x, scale }, &[x, scale]))
    }

    /// Concatenation along the trailing axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(Error::EmptyInput("concat needs at least one input"))?;
        let lead = self.value(*first).shape[..self.value(*first).shape.len() - 1].to_vec();
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let s = &self.value(*p).shape;
            if s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat", &self.value(*first).shape, s));
            }
            total += self.value(*p).cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let op = Op::Concat {
            parts: parts.to_vec(),
        };
        Ok(self.push(Tensor { shape, data }, op, parts))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv
                .data
                .iter()
                .map(|&v| if v > 0.0 { v } else { slope * v })
                .collect(),
        };
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| sigmoid(v)).collect(),
        };
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Per-channel standardization over all leading positions:
    /// `(x - mean) / sqrt(var + eps)`. Statistics are order independent.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if rows == 0 {
            return Err(Error::EmptyInput("normalize over zero rows"));
        }
        let (mean, var) = channel_stats(&xv.data, rows, cols);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = xv.data.clone();
        for row in data.chunks_exact_mut(cols) {
            for c in 0..cols {
                row[c] = (row[c] - mean[c]) * inv_std[c];
            }
        }
        let shape = xv.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Normalize { x, inv_std }, &[x]))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = xv.data.clone();
        for row in data.chunks_exact_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let z = set_sum(row.iter().copied());
            row.iter_mut().for_each(|v| *v /= z);
        }
        let shape = xv.shape.clone();
        self.push(Tensor { shape, data }, Op::Softmax(x), &[x])
    }

    /// Maximum over `axis`; the axis is removed from the output shape.
    /// Ties resolve to the lowest index, which also receives the gradient.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let xv = self.value(x);
        if axis >= xv.shape.len() || xv.shape[axis] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "max over axis {axis} of {:?}",
                xv.shape
            )));
        }
        let outer: usize = xv.shape[..axis].iter().product();
        let len = xv.shape[axis];
        let inner: usize = xv.shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for c in 0..inner {
                let mut best = xv.data[o * len * inner + c];
                let mut at = 0;
                for l in 1..len {
                    let v = xv.data[(o * len + l) * inner + c];
                    if v > best {
                        best = v;
                        at = l;
                    }
                }
                data[o * inner + c] = best;
                argmax[o * inner + c] = at;
            }
        }
        let mut shape = xv.shape.clone();
        shape.remove(axis);
        let op = Op::MaxAxis {
            x,
            argmax: argmax.clone(),
            len,
            inner,
        };
        Ok((self.push(Tensor { shape, data }, op, &[x]), argmax))
    }

    /// Rows of a 2-D tensor picked by index, repeated indices allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            if r >= rows {
                return Err(Error::IndexOutOfBounds {
                    index: r,
                    len: rows,
                });
            }
            data.extend_from_slice(xv.row(r));
        }
        let value = Tensor {
            shape: vec![idx.len(), cols],
            data,
        };
        let op = Op::Gather {
            x,
            idx: idx.to_vec(),
        };
        Ok(self.push(value, op, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(mismatch("reshape", &xv.shape, &shape));
        }
        let value = Tensor {
            shape,
            data: xv.data.clone(),
        };
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Euclidean distance between every row of `a` and every row of `b`.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.cols() != bv.cols() {
            return Err(mismatch("pairwise_dist", &av.shape, &bv.shape));
        }
        let (m, n) = (av.rows(), bv.rows());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let ai = av.row(i);
            for j in 0..n {
                let s: f64 = ai
                    .iter()
                    .zip(bv.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                data.push(s.sqrt());
            }
        }
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.push(value, Op::PairwiseDist { a, b }, &[a, b]))
    }

    /// `[-cost, α; α, α]` with one extra row and column.
    pub fn dustbins(&mut self, cost: Var, alpha: Var) -> Result<Var> {
        let (cv, av) = (self.value(cost), self.value(alpha));
        if cv.shape.len() != 2 || av.len() != 1 {
            return Err(mismatch("dustbins", &cv.shape, &av.shape));
        }
        let (m, n) = (cv.shape[0], cv.shape[1]);
        let alpha_v = av.data[0];
        let mut data = vec![alpha_v; (m + 1) * (n + 1)];
        for i in 0..m {
            for j in 0..n {
                data[i * (n + 1) + j] = -cv.data[i * n + j];
            }
        }
        let value = Tensor {
            shape: vec![m + 1, n + 1],
            data,
        };
        Ok(self.push(value, Op::Dustbins { cost, alpha }, &[cost, alpha]))
    }

    /// Log-domain Sinkhorn with dustbin marginals; outputs the plan.
    pub fn sinkhorn(&mut self, scores: Var, iters: usize) -> Result<Var> {
        let sv = self.value(scores);
        if sv.shape.len() != 2 || sv.shape[0] < 2 || sv.shape[1] < 2 {
            return Err(Error::ShapeMismatch(format!(
                "sinkhorn needs an augmented matrix, got {:?}",
                sv.shape
            )));
        }
        let (plan, trace) = crate::transport::sinkhorn_forward(sv, iters.max(1));
        let value = Tensor {
            shape: sv.shape.clone(),
            data: plan,
        };
        Ok(self.push(value, Op::Sinkhorn { scores, trace }, &[scores]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `-(1/|cells|) Σ log max(P[c], floor)` over flat cell indices.
    pub fn matching_nll(&mut self, plan: Var, cells: &[usize]) -> Result<Var> {
        let pv = self.value(plan);
        if cells.is_empty() {
            return Err(Error::EmptyInput("matching loss over zero cells"));
        }
        let mut acc = 0.0;
        for &c in cells {
            let p = *pv.data.get(c).ok_or(Error::IndexOutOfBounds {
                index: c,
                len: pv.len(),
            })?;
            acc += p.max(PROB_FLOOR).ln();
        }
        let value = Tensor::scalar(-acc / cells.len() as f64);
        let op = Op::MatchingNll {
            plan,
            cells: cells.to_vec(),
        };
        Ok(self.push(value, op, &[plan]))
    }

    /// Weighted binary cross-entropy averaged over the entries of `probs`.
    pub fn weighted_bce(&mut self, probs: Var, labels: &[f64], weights: &[f64]) -> Result<Var> {
        let pv = self.value(probs);
        if pv.len() != labels.len() || pv.len() != weights.len() {
            return Err(Error::LengthMismatch {
                left: pv.len(),
                right: labels.len().min(weights.len()),
            });
        }
        if pv.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut acc = 0.0;
        for ((p, y), w) in pv.data.iter().zip(labels).zip(weights) {
            acc += w * (y * p.max(PROB_FLOOR).ln() + (1.0 - y) * (1.0 - p).max(PROB_FLOOR).ln());
        }
        let value = Tensor::scalar(-acc / pv.len() as f64);
        let op = Op::WeightedBce {
            probs,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.push(value, op, &[probs]))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Per-channel mean and population variance over `rows`, order independent.
pub fn channel_stats(data: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows as f64;
    let mut mean = vec![0.0; cols];
    let mut var = vec![0.0; cols];
    for c in 0..cols {
        let col = (0..rows).map(|r| data[r * cols + c]);
        let mu = set_sum(col.clone()) / n;
        mean[c] = mu;
        var[c] = set_sum(col.map(|v| (v - mu) * (v - mu))) / n;
    }
    (mean, var)
}
