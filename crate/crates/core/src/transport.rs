//! Dustbin-augmented entropic optimal transport and mutual nearest
//! neighbour extraction.
//!
//! Scores are `-‖f_p - f_q‖₂` on the main block and a single learnable
//! dustbin score on the extra row and column. Every real point supplies
//! unit mass; the dustbin on each side can absorb up to the other side's
//! point count, so the marginals are `(1, …, 1, N)` over rows and
//! `(1, …, 1, M)` over columns.

use crate::autodiff::{log_sum_exp, Tensor};
use crate::correspondence::{Correspondence, CorrespondenceSet};
use crate::error::{Error, Result};

pub const DEFAULT_SINKHORN_ITERS: usize = 100;
pub const DEFAULT_DUSTBIN_SCORE: f64 = 1.0;

/// An `(M+1)×(N+1)` matrix whose last row and column are dustbins.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: Tensor,
    pub log_domain: bool,
}

impl ScoreMatrix {
    pub fn new(values: Tensor, log_domain: bool) -> Result<Self> {
        if values.shape.len() != 2 || values.shape[0] < 2 || values.shape[1] < 2 {
            return Err(Error::ShapeMismatch(format!(
                "score matrix needs at least 2×2, got {:?}",
                values.shape
            )));
        }
        Ok(Self { values, log_domain })
    }

    /// Number of real rows (2D keypoints).
    pub fn m(&self) -> usize {
        self.values.shape[0] - 1
    }

    /// Number of real columns (3D points).
    pub fn n(&self) -> usize {
        self.values.shape[1] - 1
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.data[i * self.values.shape[1] + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let cols = self.values.shape[1];
        self.values
            .data
            .chunks_exact(cols)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let cols = self.values.shape[1];
        let mut s = vec![0.0; cols];
        for row in self.values.data.chunks_exact(cols) {
            s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        s
    }

    /// Largest absolute deviation from the dustbin marginals.
    pub fn marginal_residual(&self) -> f64 {
        let (m, n) = (self.m() as f64, self.n() as f64);
        let rows = self.row_sums();
        let cols = self.col_sums();
        let last_r = rows.len() - 1;
        let last_c = cols.len() - 1;
        let r = rows
            .iter()
            .enumerate()
            .map(|(i, s)| (s - if i == last_r { n } else { 1.0 }).abs());
        let c = cols
            .iter()
            .enumerate()
            .map(|(j, s)| (s - if j == last_c { m } else { 1.0 }).abs());
        r.chain(c).fold(0.0, f64::max)
    }
}

/// `cost[i][j] = ‖f_p[i] - f_q[j]‖₂`.
pub fn cost_matrix(f_p: &Tensor, f_q: &Tensor) -> Result<Tensor> {
    if f_p.cols() != f_q.cols() {
        return Err(Error::ShapeMismatch(format!(
            "feature widths {} vs {}",
            f_p.cols(),
            f_q.cols()
        )));
    }
    let (m, n) = (f_p.rows(), f_q.rows());
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let s: f64 = f_p
                .row(i)
                .iter()
                .zip(f_q.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            data.push(s.sqrt());
        }
    }
    Tensor::new(vec![m, n], data)
}

pub fn augment_dustbins(cost: &Tensor, alpha_bin: f64) -> Result<ScoreMatrix> {
    if cost.shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!("cost shape {:?}", cost.shape)));
    }
    let (m, n) = (cost.shape[0], cost.shape[1]);
    let mut data = vec![alpha_bin; (m + 1) * (n + 1)];
    for i in 0..m {
        for j in 0..n {
            data[i * (n + 1) + j] = -cost.data[i * n + j];
        }
    }
    ScoreMatrix::new(Tensor::new(vec![m + 1, n + 1], data)?, true)
}

/// Dual potentials after every iteration, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct SinkhornTrace {
    pub(crate) u: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
}

fn log_marginals(rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (rows - 1, cols - 1);
    let mut log_mu = vec![0.0; rows];
    log_mu[m] = (n as f64).ln();
    let mut log_nu = vec![0.0; cols];
    log_nu[n] = (m as f64).ln();
    (log_mu, log_nu)
}

/// Runs `iters` log-domain row/column updates on augmented `scores` and
/// returns the exponentiated plan with the potential history.
pub(crate) fn sinkhorn_forward(scores: &Tensor, iters: usize) -> (Vec<f64>, SinkhornTrace) {
    let (rows, cols) = (scores.shape[0], scores.shape[1]);
    let z = &scores.data;
    let (log_mu, log_nu) = log_marginals(rows, cols);
    let mut u = vec![0.0; rows];
    let mut v = vec![0.0; cols];
    let mut trace = SinkhornTrace {
        u: Vec::with_capacity(iters),
        v: Vec::with_capacity(iters),
    };
    for _ in 0..iters {
        for i in 0..rows {
            let row = &z[i * cols..(i + 1) * cols];
            u[i] = log_mu[i] - log_sum_exp(row.iter().zip(&v).map(|(a, b)| a + b));
        }
        for j in 0..cols {
            v[j] = log_nu[j] - log_sum_exp((0..rows).map(|i| z[i * cols + j] + u[i]));
        }
        trace.u.push(u.clone());
        trace.v.push(v.clone());
    }
    let mut plan = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            plan[i * cols + j] = (z[i * cols + j] + u[i] + v[j]).exp();
        }
    }
    (plan, trace)
}

/// Reverse pass through every Sinkhorn iteration.
pub(crate) fn sinkhorn_backward(
    scores: &Tensor,
    trace: &SinkhornTrace,
    plan: &[f64],
    g_plan: &[f64],
) -> Vec<f64> {
    let (rows, cols) = (scores.shape[0], scores.shape[1]);
    let z = &scores.data;
    let (log_mu, log_nu) = log_marginals(rows, cols);

    let mut gz: Vec<f64> = g_plan.iter().zip(plan).map(|(g, p)| g * p).collect();
    let mut gu = vec![0.0; rows];
    let mut gv = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            let gl = gz[i * cols + j];
            gu[i] += gl;
            gv[j] += gl;
        }
    }

    let zeros = vec![0.0; cols];
    for t in (0..trace.u.len()).rev() {
        let u = &trace.u[t];
        let v = &trace.v[t];
        let v_prev = if t == 0 { &zeros } else { &trace.v[t - 1] };

        // v_j = log_nu_j - LSE_i(z_ij + u_i); column softmax weights B.
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                let b = (z[i * cols + j] + u[i] + v[j] - log_nu[j]).exp();
                gz[i * cols + j] -= gv[j] * b;
                acc += gv[j] * b;
            }
            gu[i] -= acc;
        }

        // u_i = log_mu_i - LSE_j(z_ij + v_prev_j); row softmax weights A.
        let mut gv_prev = vec![0.0; cols];
        for i in 0..rows {
            let shift = u[i] - log_mu[i];
            for j in 0..cols {
                let a = (z[i * cols + j] + v_prev[j] + shift).exp();
                gz[i * cols + j] -= gu[i] * a;
                gv_prev[j] -= gu[i] * a;
            }
        }
        gv = gv_prev;
        gu.iter_mut().for_each(|x| *x = 0.0);
    }
    gz
}

/// Transport plan (probabilities) for an augmented score matrix.
pub fn sinkhorn(s: &ScoreMatrix, iters: usize) -> Result<ScoreMatrix> {
    if iters == 0 {
        return Err(Error::InvalidConfig("sinkhorn needs at least one iteration".into()));
    }
    let (plan, _) = sinkhorn_forward(&s.values, iters);
    ScoreMatrix::new(Tensor::new(s.values.shape.clone(), plan)?, false)
}

/// Pairs that are each other's best entry once the dustbins are removed.
pub fn mutual_nn(plan: &ScoreMatrix) -> CorrespondenceSet {
    let (m, n) = (plan.m(), plan.n());
    let row_best: Vec<usize> = (0..m)
        .map(|i| argmax((0..n).map(|j| plan.get(i, j))))
        .collect();
    let col_best: Vec<usize> = (0..n)
        .map(|j| argmax((0..m).map(|i| plan.get(i, j))))
        .collect();
    let mut out = Vec::new();
    for (i, &j) in row_best.iter().enumerate() {
        if n == 0 || col_best[j] != i {
            continue;
        }
        out.push(Correspondence::new(i, j, plan.get(i, j).clamp(0.0, 1.0)));
    }
    CorrespondenceSet::new(out)
}

/// Index of the first maximum.
fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut at = 0;
    for (k, x) in xs.enumerate() {
        if x > best {
            best = x;
            at = k;
        }
    }
    at
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scores(m: usize, n: usize, seed: u64) -> ScoreMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..(m + 1) * (n + 1))
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        ScoreMatrix::new(Tensor::new(vec![m + 1, n + 1], data).unwrap(), true).unwrap()
    }

    #[test]
    fn cost_matrix_cases() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(cost_matrix(&a, &b).unwrap().data, vec![5.0]);
        assert_eq!(cost_matrix(&a, &a).unwrap().data, vec![0.0]);

        let p = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 3.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let pq = cost_matrix(&p, &q).unwrap();
        let qp = cost_matrix(&q, &p).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(pq.data[i * 2 + j], qp.data[j * 3 + i]);
            }
        }
        let bad = Tensor::from_rows(&[vec![1.0]]).unwrap();
        assert!(cost_matrix(&p, &bad).is_err());
    }

    #[test]
    fn dustbin_layout() {
        let c = Tensor::from_rows(&[vec![0.25]]).unwrap();
        let s = augment_dustbins(&c, 1.5).unwrap();
        assert_eq!(s.values.shape, vec![2, 2]);
        assert_eq!(s.values.data, vec![-0.25, 1.5, 1.5, 1.5]);
    }

    #[test]
    fn marginals_after_100_iterations() {
        let s = random_scores(8, 11, 3);
        let plan = sinkhorn(&s, 100).unwrap();
        // Oracle: direct row and column sums.
        let rows = plan.row_sums();
        let cols = plan.col_sums();
        for (i, r) in rows.iter().enumerate() {
            let want = if i == 8 { 11.0 } else { 1.0 };
            assert!((r - want).abs() < 1e-6, "row {i}: {r}");
        }
        for (j, c) in cols.iter().enumerate() {
            let want = if j == 11 { 8.0 } else { 1.0 };
            assert!((c - want).abs() < 1e-6, "col {j}: {c}");
        }
    }

    #[test]
    fn uniform_scores_give_uniform_classes() {
        let s = ScoreMatrix::new(Tensor::filled(vec![4, 5], 0.3), true).unwrap();
        let plan = sinkhorn(&s, 200).unwrap();
        let main = plan.get(0, 0);
        for i in 0..3 {
            for j in 0..4 {
                assert!((plan.get(i, j) - main).abs() < 1e-9);
            }
            assert!((plan.get(i, 4) - plan.get(0, 4)).abs() < 1e-9);
        }
        for j in 0..4 {
            assert!((plan.get(3, j) - plan.get(3, 0)).abs() < 1e-9);
        }
    }

    #[test]
    fn residual_is_non_increasing() {
        for seed in 0..5 {
            let s = random_scores(6, 9, seed);
            let mut prev = f64::INFINITY;
            for iters in 1..40 {
                let r = sinkhorn(&s, iters).unwrap().marginal_residual();
                assert!(r <= prev + 1e-12, "seed {seed} iter {iters}: {r} > {prev}");
                prev = r;
            }
        }
    }

    #[test]
    fn shift_invariance() {
        let s = random_scores(5, 7, 11);
        let mut shifted = s.clone();
        shifted.values.data.iter_mut().for_each(|v| *v += 3.25);
        let a = sinkhorn(&s, 100).unwrap();
        let b = sinkhorn(&shifted, 100).unwrap();
        for (x, y) in a.values.data.iter().zip(&b.values.data) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        assert!(sinkhorn(&random_scores(2, 2, 0), 0).is_err());
    }

    fn plan_from(rows: &[Vec<f64>]) -> ScoreMatrix {
        ScoreMatrix::new(Tensor::from_rows(rows).unwrap(), false).unwrap()
    }

    #[test]
    fn mutual_nn_identity() {
        let plan = plan_from(&[
            vec![0.9, 0.05, 0.0, 0.05],
            vec![0.0, 0.8, 0.1, 0.1],
            vec![0.1, 0.0, 0.7, 0.2],
            vec![0.0, 0.15, 0.2, 0.0],
        ]);
        let out = mutual_nn(&plan);
        let pairs: Vec<(usize, usize)> = out.iter().map(|c| (c.keypoint, c.point)).collect();
        assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(out.pairs[0].score, 0.9);
    }

    #[test]
    fn mutual_nn_rejects_one_sided() {
        // Row 0 prefers column 0 but column 0 prefers row 1.
        let plan = plan_from(&[
            vec![0.5, 0.1, 0.0],
            vec![0.6, 0.3, 0.0],
            vec![0.0, 0.0, 0.0],
        ]);
        let out = mutual_nn(&plan);
        assert!(!out.contains_pair(0, 0));
        assert!(out.contains_pair(1, 0));
    }

    #[test]
    fn mutual_nn_ignores_dustbin_mass() {
        let plan = plan_from(&[vec![0.3, 0.7], vec![0.1, 0.0]]);
        let out = mutual_nn(&plan);
        assert!(out.contains_pair(0, 0));
        assert_eq!(out.pairs[0].score, 0.3);
    }

    #[test]
    fn mutual_nn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..7)
                .map(|_| (0..10).map(|_| rng.random::<f64>()).collect())
                .collect();
            let plan = plan_from(&rows);
            // Oracle: enumerate every cell and test the definition directly.
            let mut want = Vec::new();
            for i in 0..6 {
                for j in 0..9 {
                    let p = rows[i][j];
                    let row_max = (0..9).all(|jj| rows[i][jj] < p || (rows[i][jj] == p && jj >= j));
                    let col_max = (0..6).all(|ii| rows[ii][j] < p || (rows[ii][j] == p && ii >= i));
                    if row_max && col_max {
                        want.push((i, j));
                    }
                }
            }
            let got: Vec<(usize, usize)> =
                mutual_nn(&plan).iter().map(|c| (c.keypoint, c.point)).collect();
            assert_eq!(got, want);
        }
    }
}
