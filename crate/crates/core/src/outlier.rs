//! Inlier classification of initial correspondences from bearing positions.

use crate::autodiff::Tensor;
use crate::correspondence::CorrespondenceSet;
use crate::error::{Error, Result};
use crate::geometry::BearingVector;
use crate::network::{Mode, ModelWeights, Net};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub b_p: BearingVector,
    pub b_q: BearingVector,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateBatch {
    pub candidates: Vec<Candidate>,
}

impl CandidateBatch {
    /// Candidates for each pair of `init`, looked up in the bearing tables.
    pub fn from_matches(
        init: &CorrespondenceSet,
        kp_bearings: &[BearingVector],
        pt_bearings: &[BearingVector],
    ) -> Result<Self> {
        let candidates = init
            .iter()
            .map(|c| {
                let b_p = *kp_bearings.get(c.keypoint).ok_or(Error::IndexOutOfBounds {
                    index: c.keypoint,
                    len: kp_bearings.len(),
                })?;
                let b_q = *pt_bearings.get(c.point).ok_or(Error::IndexOutOfBounds {
                    index: c.point,
                    len: pt_bearings.len(),
                })?;
                Ok(Candidate {
                    b_p,
                    b_q,
                    score: c.score,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { candidates })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Classifier input rows `[b_p, b_q]`, optionally followed by the score.
    pub fn rows(&self, with_score: bool) -> Tensor {
        let width = if with_score { 5 } else { 4 };
        let mut data = Vec::with_capacity(self.len() * width);
        for c in &self.candidates {
            data.extend_from_slice(&[c.b_p.x, c.b_p.y, c.b_q.x, c.b_q.y]);
            if with_score {
                data.push(c.score);
            }
        }
        Tensor {
            shape: vec![self.len(), width],
            data,
        }
    }
}

/// Inlier probability per candidate.
pub fn classify(batch: &CandidateBatch, w: &ModelWeights) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut net = Net::new(w, Mode::Eval);
    let probs = net.classify(batch.rows(w.config.classifier_score_input))?;
    Ok(net.tape.value(probs).data.clone())
}

/// Keep the pairs whose probability exceeds `t`, in their original order.
pub fn filter(init: &CorrespondenceSet, probs: &[f64], t: f64) -> Result<CorrespondenceSet> {
    if probs.len() != init.len() {
        return Err(Error::LengthMismatch {
            left: init.len(),
            right: probs.len(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidConfig(format!("threshold {t} outside [0, 1]")));
    }
    Ok(init
        .iter()
        .zip(probs)
        .filter(|(_, p)| **p > t)
        .map(|(c, _)| *c)
        .collect())
}

/// Inverse class-frequency weights `N/(2·N_class)`, clamped to `[0.1, 10]`.
pub fn balance_weights(labels: &[f64]) -> Vec<f64> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|y| **y > 0.5).count() as f64;
    let neg = n - pos;
    labels
        .iter()
        .map(|y| {
            let count = if *y > 0.5 { pos } else { neg };
            (n / (2.0 * count)).clamp(0.1, 10.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::correspondence::Correspondence;
    use crate::network::NetworkConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn weights() -> ModelWeights {
        let cfg = NetworkConfig {
            d: 16,
            classifier_units: 6,
            ..NetworkConfig::default()
        };
        ModelWeights::init(&cfg, 3).unwrap()
    }

    fn random_batch(n: usize, seed: u64) -> CandidateBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = || BearingVector::new(rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4));
        CandidateBatch {
            candidates: (0..n)
                .map(|_| Candidate {
                    b_p: b(),
                    b_q: b(),
                    score: 0.5,
                })
                .collect(),
        }
    }

    #[test]
    fn probabilities_in_open_interval() {
        let w = weights();
        let p = classify(&random_batch(20, 1), &w).unwrap();
        assert_eq!(p.len(), 20);
        assert!(p.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
        assert!(matches!(
            classify(&CandidateBatch::default(), &w),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn classification_is_permutation_equivariant() {
        let w = weights();
        let batch = random_batch(15, 2);
        let p = classify(&batch, &w).unwrap();
        let mut rev = batch.clone();
        rev.candidates.reverse();
        let q = classify(&rev, &w).unwrap();
        let mut q_back = q.clone();
        q_back.reverse();
        assert_eq!(p, q_back);
    }

    #[test]
    fn context_norm_removes_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |shift: f64| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![10, 4], data.iter().map(|v| v + shift).collect()).unwrap());
            let y = tape.normalize(x, 1e-5).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(0.0), run(3.7));
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    fn set_of(n: usize) -> CorrespondenceSet {
        (0..n).map(|i| Correspondence::new(i, n - 1 - i, 0.9)).collect()
    }

    #[test]
    fn filter_extremes() {
        let init = set_of(5);
        let probs = [0.1, 0.9, 0.5, 0.7, 0.3];
        assert_eq!(filter(&init, &probs, 0.0).unwrap(), init);
        assert!(filter(&init, &probs, 1.0).unwrap().is_empty());
        let mid = filter(&init, &probs, 0.5).unwrap();
        assert_eq!(mid.iter().map(|c| c.keypoint).collect::<Vec<_>>(), vec![1, 3]);
        assert!(filter(&init, &probs[..3], 0.5).is_err());
    }

    #[test]
    fn balance_weights_by_class() {
        let w = balance_weights(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(w, vec![2.0, 4.0 / 6.0, 4.0 / 6.0, 4.0 / 6.0]);
        assert!(balance_weights(&[1.0; 5]).iter().all(|v| *v == 0.5));
        let skewed: Vec<f64> = (0..100).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(balance_weights(&skewed)[0], 10.0);
    }

    proptest! {
        #[test]
        fn filter_is_monotone_subset(
            probs in proptest::collection::vec(0.0f64..1.0, 0..40),
            t1 in 0.0f64..=1.0,
            t2 in 0.0f64..=1.0,
        ) {
            let init = set_of(probs.len());
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = filter(&init, &probs, lo).unwrap();
            let b = filter(&init, &probs, hi).unwrap();
            prop_assert!(a.iter().all(|c| init.contains_pair(c.keypoint, c.point)));
            prop_assert!(b.iter().all(|c| a.contains_pair(c.keypoint, c.point)));
        }
    }
}
