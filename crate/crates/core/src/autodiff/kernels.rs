//! Dense row-major kernels shared by forward and backward rules.

/// Terms are accumulated as integers scaled by 2^64, so the result does not
/// depend on the order of the terms. Magnitudes above this limit fall back
/// to a sorted sum, which is also order independent.
const FIXED_LIMIT: f64 = 1.125899906842624e15; // 2^50
const FIXED_SCALE: f64 = 18446744073709551616.0; // 2^64
const FIXED_INV: f64 = 5.421010862427522e-20; // 2^-64

/// Sum that is invariant to any permutation of the terms.
pub fn set_sum<I>(xs: I) -> f64
where
    I: IntoIterator<Item = f64>,
    I::IntoIter: Clone,
{
    let iter = xs.into_iter();
    let mut acc: i128 = 0;
    for x in iter.clone() {
        if x.abs() >= FIXED_LIMIT || !x.is_finite() {
            let mut all: Vec<f64> = iter.collect();
            all.sort_by(f64::total_cmp);
            return all.iter().sum();
        }
        acc += (x * FIXED_SCALE) as i128;
    }
    acc as f64 * FIXED_INV
}

/// `out[r×o] = a[r×c] · b[c×o]`.
pub fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let arow = &a[r * inner..(r + 1) * inner];
        let orow = &mut out[r * cols..(r + 1) * cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * cols..(k + 1) * cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Like [`matmul`] but the contraction over `inner` uses [`set_sum`] semantics, so
/// permuting the inner axis (rows of `b`, columns of `a`) together leaves
/// the result bit-identical.
pub fn matmul_set(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    let mut acc: Vec<i128> = vec![0; cols];
    for r in 0..rows {
        acc.iter_mut().for_each(|x| *x = 0);
        let mut spill = false;
        let arow = &a[r * inner..(r + 1) * inner];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b[k * cols..(k + 1) * cols];
            for (acc_o, &bv) in acc.iter_mut().zip(brow) {
                let p = av * bv;
                if p.abs() >= FIXED_LIMIT || !p.is_finite() {
                    spill = true;
                }
                *acc_o += (p * FIXED_SCALE) as i128;
            }
        }
        let orow = &mut out[r * cols..(r + 1) * cols];
        if spill {
            for (o, slot) in orow.iter_mut().enumerate() {
                *slot = set_sum((0..inner).map(|k| arow[k] * b[k * cols + o]));
            }
        } else {
            for (slot, &v) in orow.iter_mut().zip(&acc) {
                *slot = v as f64 * FIXED_INV;
            }
        }
    }
    out
}

/// `out[r×s] = a[r×c] · b[s×c]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], rows: usize, inner: usize, other: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * other];
    for r in 0..rows {
        let arow = &a[r * inner..(r + 1) * inner];
        for s in 0..other {
            let brow = &b[s * inner..(s + 1) * inner];
            out[r * other + s] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[c×o] += a[r×c]ᵀ · g[r×o]`.
pub fn matmul_tn_acc(a: &[f64], g: &[f64], rows: usize, inner: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let arow = &a[r * inner..(r + 1) * inner];
        let grow = &g[r * cols..(r + 1) * cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[k * cols..(k + 1) * cols];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out[r×c] += g[r×o] · b[c×o]ᵀ`.
pub fn matmul_nt_acc(g: &[f64], b: &[f64], rows: usize, cols: usize, inner: usize, out: &mut [f64]) {
    for r in 0..rows {
        let grow = &g[r * cols..(r + 1) * cols];
        let orow = &mut out[r * inner..(r + 1) * inner];
        for (k, slot) in orow.iter_mut().enumerate() {
            let brow = &b[k * cols..(k + 1) * cols];
            *slot += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}
