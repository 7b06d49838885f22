use serde::{Deserialize, Serialize};

/// One 2D-3D pairing: keypoint index, scene point index and a confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub keypoint: usize,
    pub point: usize,
    pub score: f64,
}

impl Correspondence {
    pub fn new(keypoint: usize, point: usize, score: f64) -> Self {
        Self {
            keypoint,
            point,
            score,
        }
    }
}

/// An ordered list of correspondences. Every producer in this crate keeps
/// the set one-to-one: no keypoint and no scene point appears twice.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<Correspondence>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Correspondence> {
        self.pairs.iter()
    }

    pub fn contains_pair(&self, keypoint: usize, point: usize) -> bool {
        self.pairs
            .iter()
            .any(|c| c.keypoint == keypoint && c.point == point)
    }

    /// Keypoint index to point index lookup table of length `n_keypoints`.
    pub fn keypoint_map(&self, n_keypoints: usize) -> Vec<Option<usize>> {
        let mut map = vec![None; n_keypoints];
        for c in &self.pairs {
            if c.keypoint < n_keypoints {
                map[c.keypoint] = Some(c.point);
            }
        }
        map
    }

    pub fn is_one_to_one(&self) -> bool {
        let mut kp: Vec<usize> = self.pairs.iter().map(|c| c.keypoint).collect();
        let mut pt: Vec<usize> = self.pairs.iter().map(|c| c.point).collect();
        kp.sort_unstable();
        pt.sort_unstable();
        kp.windows(2).all(|w| w[0] != w[1]) && pt.windows(2).all(|w| w[0] != w[1])
    }

    /// Number of pairs also present in `truth`.
    pub fn true_positives(&self, truth: &CorrespondenceSet, n_keypoints: usize) -> usize {
        let map = truth.keypoint_map(n_keypoints);
        self.pairs
            .iter()
            .filter(|c| c.keypoint < n_keypoints && map[c.keypoint] == Some(c.point))
            .count()
    }
}

impl FromIterator<Correspondence> for CorrespondenceSet {
    fn from_iter<I: IntoIterator<Item = Correspondence>>(iter: I) -> Self {
        Self {
            pairs: iter.into_iter().collect(),
        }
    }
}
