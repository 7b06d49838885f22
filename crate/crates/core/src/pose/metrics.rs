use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, CameraIntrinsics, RigidPose, ScenePoint3D};

pub const AUC_THRESHOLDS: [f64; 3] = [1.0, 5.0, 10.0];
pub const QUANTILES: [f64; 3] = [25.0, 50.0, 75.0];

/// Degrees, in `[0, 180]`.
pub fn rotation_error(est: &RigidPose, gt: &RigidPose) -> f64 {
    let rel = est.rotation.transpose() * gt.rotation;
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn translation_error(est: &RigidPose, gt: &RigidPose) -> f64 {
    (est.translation - gt.translation).norm()
}

/// Mean pixel distance between each point's projection under the estimated
/// pose and under the true pose. `+∞` when nothing can be measured.
pub fn mean_reprojection_error<'a>(
    k: &CameraIntrinsics,
    est: &RigidPose,
    gt: &RigidPose,
    points: impl IntoIterator<Item = &'a ScenePoint3D>,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in points {
        let (Ok(a), Ok(b)) = (project(k, est, p), project(k, gt, p)) else {
            return f64::INFINITY;
        };
        sum += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        count += 1;
    }
    if count == 0 {
        f64::INFINITY
    } else {
        sum / count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucMode {
    /// Mean of `max(0, 1 − e/τ)`.
    #[default]
    Linear,
    /// Area under the recall-vs-error curve on `[0, τ]`, normalized by `τ`.
    Cumulative,
}

/// Percentages, one per threshold.
pub fn reprojection_auc(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    reprojection_auc_with(errors, thresholds, AucMode::Linear)
}

pub fn reprojection_auc_with(errors: &[f64], thresholds: &[f64], mode: AucMode) -> Vec<f64> {
    if errors.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    let n = errors.len() as f64;
    match mode {
        AucMode::Linear => thresholds
            .iter()
            .map(|&t| {
                errors.iter().map(|e| (1.0 - e / t).max(0.0)).sum::<f64>() / n * 100.0
            })
            .collect(),
        AucMode::Cumulative => {
            let mut sorted = errors.to_vec();
            sorted.sort_by(f64::total_cmp);
            thresholds
                .iter()
                .map(|&t| {
                    // Recall steps up by 1/n at each sorted error below t.
                    let mut area = 0.0;
                    let mut prev_e = 0.0;
                    let mut recall = 0.0;
                    for e in sorted.iter().copied().filter(|e| *e < t) {
                        area += recall * (e - prev_e);
                        prev_e = e;
                        recall += 1.0 / n;
                    }
                    area += recall * (t - prev_e);
                    area / t * 100.0
                })
                .collect()
        }
    }
}

/// Linear-interpolation quantiles; `+∞` entries sort last.
pub fn error_quantiles(errors: &[f64], percentiles: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut s = errors.to_vec();
    s.sort_by(f64::total_cmp);
    let last = (s.len() - 1) as f64;
    Ok(percentiles
        .iter()
        .map(|p| {
            let pos = (p / 100.0).clamp(0.0, 1.0) * last;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            if lo == hi || frac == 0.0 {
                s[lo]
            } else if s[hi].is_infinite() || s[lo].is_infinite() {
                f64::INFINITY
            } else {
                s[lo] + frac * (s[hi] - s[lo])
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub n_queries: usize,
    pub n_success: usize,
    /// AUC (%) at 1, 5 and 10 px.
    pub auc: [f64; 3],
    /// Degrees at 25/50/75 %.
    pub rotation_quantiles: [f64; 3],
    pub translation_quantiles: [f64; 3],
    pub mean_wall_seconds: f64,
}

impl EvalSummary {
    pub fn from_errors(
        reproj: &[f64],
        rot: &[f64],
        trans: &[f64],
        successes: usize,
        wall: &[f64],
    ) -> Result<Self> {
        let auc = reprojection_auc(reproj, &AUC_THRESHOLDS);
        let rq = error_quantiles(rot, &QUANTILES)?;
        let tq = error_quantiles(trans, &QUANTILES)?;
        Ok(Self {
            n_queries: reproj.len(),
            n_success: successes,
            auc: [auc[0], auc[1], auc[2]],
            rotation_quantiles: [rq[0], rq[1], rq[2]],
            translation_quantiles: [tq[0], tq[1], tq[2]],
            mean_wall_seconds: wall.iter().sum::<f64>() / wall.len().max(1) as f64,
        })
    }
}
