use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::neighbor_cosine;

/// Which edge direction serves as the reference `a` in the angle cosine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleConvention {
    /// `a = i→j₁` (nearest neighbor), `b = i→jₘ`.
    #[default]
    NearestNeighbor,
    /// `a = i→jₘ₋₁`, `b = i→jₘ` (consecutive neighbors, wrapping to the last).
    Consecutive,
}

/// Distance-sorted k-nearest-neighbor graph over 2D positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGraph {
    pub k: usize,
    /// Row-major `N×k`.
    pub neighbor_idx: Vec<usize>,
    pub neighbor_dist: Vec<f64>,
    pub neighbor_cos: Vec<f64>,
}

impl LocalGraph {
    pub fn len(&self) -> usize {
        self.neighbor_idx.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_idx.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_idx[i * self.k..(i + 1) * self.k]
    }

    pub fn distances(&self, i: usize) -> &[f64] {
        &self.neighbor_dist[i * self.k..(i + 1) * self.k]
    }

    pub fn cosines(&self, i: usize) -> &[f64] {
        &self.neighbor_cos[i * self.k..(i + 1) * self.k]
    }
}

pub fn build_knn_graph(positions: &[[f64; 2]], k: usize) -> Result<LocalGraph> {
    build_knn_graph_with(positions, k, AngleConvention::default())
}

pub fn build_knn_graph_with(
    positions: &[[f64; 2]],
    k: usize,
    convention: AngleConvention,
) -> Result<LocalGraph> {
    let n = positions.len();
    if k == 0 || n <= k {
        return Err(Error::TooFewPoints { n, k });
    }
    let mut neighbor_idx = Vec::with_capacity(n * k);
    let mut neighbor_dist = Vec::with_capacity(n * k);
    let mut neighbor_cos = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for (i, pi) in positions.iter().enumerate() {
        cand.clear();
        cand.extend(
            positions
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, pj)| (((pj[0] - pi[0]).powi(2) + (pj[1] - pi[1]).powi(2)).sqrt(), j)),
        );
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(k - 1, by_dist);
        cand[..k].sort_unstable_by(by_dist);
        let edge = |j: usize| [positions[j][0] - pi[0], positions[j][1] - pi[1]];
        for m in 0..k {
            let (dist, j) = cand[m];
            neighbor_idx.push(j);
            neighbor_dist.push(dist);
            let reference = match convention {
                AngleConvention::NearestNeighbor => cand[0].1,
                AngleConvention::Consecutive => cand[(m + k - 1) % k].1,
            };
            let c = neighbor_cosine(edge(reference), edge(j));
            neighbor_cos.push(if reference == j && c != 0.0 { 1.0 } else { c });
        }
    }
    Ok(LocalGraph {
        k,
        neighbor_idx,
        neighbor_dist,
        neighbor_cos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_positions(n: usize, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect()
    }

    #[test]
    fn collinear_middle_point() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        let g = build_knn_graph(&pts, 2).unwrap();
        // Exhaustive oracle: sort all other points by distance.
        for i in 0..4 {
            let mut all: Vec<(f64, usize)> = (0..4)
                .filter(|&j| j != i)
                .map(|j| ((pts[j][0] - pts[i][0]).abs(), j))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all[..2].iter().map(|x| x.1).collect();
            assert_eq!(g.neighbors(i), &want[..]);
        }
        let mut mid = g.neighbors(1).to_vec();
        mid.sort();
        assert_eq!(mid, vec![0, 2]);
    }

    #[test]
    fn too_few_points() {
        let pts = random_positions(9, 0);
        assert!(matches!(
            build_knn_graph(&pts, 9),
            Err(Error::TooFewPoints { n: 9, k: 9 })
        ));
    }

    #[test]
    fn rows_are_distinct_sorted_and_loop_free() {
        let pts = random_positions(50, 1);
        let g = build_knn_graph(&pts, 9).unwrap();
        assert_eq!(g.len(), 50);
        for i in 0..50 {
            let nb = g.neighbors(i);
            assert!(!nb.contains(&i));
            let mut s = nb.to_vec();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 9);
            assert!(g.distances(i).windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(g.cosines(i)[0], 1.0);
        }
    }

    #[test]
    fn cosines_survive_rotation() {
        let pts = random_positions(40, 2);
        let theta: f64 = 0.8;
        let (s, c) = theta.sin_cos();
        let rotated: Vec<[f64; 2]> = pts
            .iter()
            .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
            .collect();
        let a = build_knn_graph(&pts, 9).unwrap();
        let b = build_knn_graph(&rotated, 9).unwrap();
        assert_eq!(a.neighbor_idx, b.neighbor_idx);
        for (x, y) in a.neighbor_cos.iter().zip(&b.neighbor_cos) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn cosines_bounded(seed in 0u64..1000, consecutive in any::<bool>()) {
            let conv = if consecutive { AngleConvention::Consecutive } else { AngleConvention::NearestNeighbor };
            let g = build_knn_graph_with(&random_positions(20, seed), 6, conv).unwrap();
            prop_assert!(g.neighbor_cos.iter().all(|c| (-1.0..=1.0).contains(c)));
        }
    }
}
