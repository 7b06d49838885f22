//! PnP-RANSAC and localization metrics.

mod metrics;
mod p3p;
mod pipeline;

pub use metrics::{
    error_quantiles, mean_reprojection_error, reprojection_auc, reprojection_auc_with,
    rotation_error, translation_error, AucMode, EvalSummary,
};
pub use p3p::{absolute_orientation, p3p};
pub use pipeline::{
    correspondence_stats, evaluate_queries, localize, match_scene, outlier_sweep, MatchOutput,
    MatchStats, QueryResult, SweepOptions, SweepRow,
};

use nalgebra::{Matrix6, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    bearing_from_pixel, rotation_from_axis_angle, BearingVector, CameraIntrinsics, Keypoint2D,
    RigidPose, ScenePoint3D, DEPTH_EPSILON,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Reprojection distance in normalized image coordinates.
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub seed: u64,
    pub refine_iterations: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            inlier_threshold: 0.005,
            confidence: 0.999,
            seed: 0,
            refine_iterations: 10,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::InvalidConfig("inlier_threshold must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidConfig("confidence must lie in (0, 1)".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

pub const MIN_INLIERS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: RigidPose,
    pub inlier_mask: Vec<bool>,
    pub success: bool,
    pub iterations: usize,
}

impl PoseEstimate {
    pub fn n_inliers(&self) -> usize {
        self.inlier_mask.iter().filter(|m| **m).count()
    }
}

fn residual(pose: &RigidPose, x: &Vector3<f64>, b: &BearingVector) -> Option<f64> {
    let p = pose.transform(x);
    if p.z <= DEPTH_EPSILON {
        return None;
    }
    Some(((p.x / p.z - b.x).powi(2) + (p.y / p.z - b.y).powi(2)).sqrt())
}

fn inliers(pose: &RigidPose, b: &[BearingVector], x: &[Vector3<f64>], thr: f64) -> Vec<bool> {
    b.iter()
        .zip(x)
        .map(|(b, x)| residual(pose, x, b).is_some_and(|r| r < thr))
        .collect()
}

fn collinear(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> bool {
    let u = b - a;
    let v = c - a;
    u.cross(&v).norm() <= 1e-10 * u.norm() * v.norm()
}

/// Gauss-Newton on normalized reprojection residuals with a left-multiplied
/// rotation update.
pub fn refine_pose(
    pose: &RigidPose,
    b: &[BearingVector],
    x: &[Vector3<f64>],
    iterations: usize,
) -> RigidPose {
    let mut pose = *pose;
    for _ in 0..iterations {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        let mut cost = 0.0;
        for (bi, xi) in b.iter().zip(x) {
            let rx = pose.rotation * xi;
            let p = rx + pose.translation;
            if p.z <= DEPTH_EPSILON {
                continue;
            }
            let iz = 1.0 / p.z;
            let r = [p.x * iz - bi.x, p.y * iz - bi.y];
            cost += r[0] * r[0] + r[1] * r[1];
            // d(proj)/dp
            let jp = [[iz, 0.0, -p.x * iz * iz], [0.0, iz, -p.y * iz * iz]];
            // dp/dω = −[Rx]×, dp/dt = I
            let skew = [
                [0.0, rx.z, -rx.y],
                [-rx.z, 0.0, rx.x],
                [rx.y, -rx.x, 0.0],
            ];
            for row in 0..2 {
                let mut j = Vector6::zeros();
                for c in 0..3 {
                    j[c] = (0..3).map(|k| jp[row][k] * skew[k][c]).sum();
                    j[3 + c] = jp[row][c];
                }
                jtj += j * j.transpose();
                jtr += j * r[row];
            }
        }
        if cost < 1e-30 {
            break;
        }
        let Some(delta) = jtj.cholesky().map(|c| c.solve(&(-jtr))) else {
            break;
        };
        if !delta.iter().all(|v| v.is_finite()) {
            break;
        }
        let w = Vector3::new(delta[0], delta[1], delta[2]);
        let dt = Vector3::new(delta[3], delta[4], delta[5]);
        let candidate = RigidPose::new(
            rotation_from_axis_angle(&w) * pose.rotation,
            pose.translation + dt,
        )
        .orthonormalized();
        pose = candidate;
        if delta.norm() < 1e-15 {
            break;
        }
    }
    pose
}

/// RANSAC over minimal P3P samples plus a fourth point for disambiguation.
pub fn pnp_ransac_bearings(
    bearings: &[BearingVector],
    points: &[Vector3<f64>],
    cfg: &RansacConfig,
) -> Result<PoseEstimate> {
    cfg.validate()?;
    if bearings.len() != points.len() {
        return Err(Error::LengthMismatch {
            left: bearings.len(),
            right: points.len(),
        });
    }
    let n = bearings.len();
    if n < 4 {
        return Err(Error::TooFewCorrespondences(n));
    }
    let rays: Vec<Vector3<f64>> = bearings.iter().map(|b| b.homogeneous().normalize()).collect();
    let thr = cfg.inlier_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, RigidPose)> = None;
    let mut needed = cfg.max_iterations;
    let mut it = 0;
    while it < needed.min(cfg.max_iterations) {
        it += 1;
        let idx = sample(&mut rng, n, 4).into_vec();
        let (a, b, c, d) = (idx[0], idx[1], idx[2], idx[3]);
        if collinear(&points[a], &points[b], &points[c]) {
            continue;
        }
        let hyps = p3p(&[rays[a], rays[b], rays[c]], &[points[a], points[b], points[c]]);
        let chosen = hyps
            .into_iter()
            .filter_map(|h| residual(&h, &points[d], &bearings[d]).map(|r| (r, h)))
            .filter(|(r, _)| *r < thr)
            .min_by(|x, y| x.0.total_cmp(&y.0));
        let Some((_, pose)) = chosen else {
            continue;
        };
        let count = inliers(&pose, bearings, points, thr).iter().filter(|m| **m).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            let ratio = count as f64 / n as f64;
            let miss = 1.0 - ratio.powi(4);
            needed = if miss <= f64::EPSILON {
                it
            } else {
                let k = (1.0 - cfg.confidence).ln() / miss.ln();
                if k.is_finite() { k.ceil().max(1.0) as usize } else { cfg.max_iterations }
            };
            best = Some((count, pose));
        }
    }

    let Some((_, pose)) = best else {
        return Ok(PoseEstimate {
            pose: RigidPose::identity(),
            inlier_mask: vec![false; n],
            success: false,
            iterations: it,
        });
    };
    let mut mask = inliers(&pose, bearings, points, thr);
    let mut pose = pose;
    for _ in 0..2 {
        let (b, x): (Vec<BearingVector>, Vec<Vector3<f64>>) = mask
            .iter()
            .zip(bearings.iter().zip(points))
            .filter(|(m, _)| **m)
            .map(|(_, (b, x))| (*b, *x))
            .unzip();
        if b.len() < MIN_INLIERS {
            break;
        }
        pose = refine_pose(&pose, &b, &x, cfg.refine_iterations);
        mask = inliers(&pose, bearings, points, thr);
    }
    let success = mask.iter().filter(|m| **m).count() >= MIN_INLIERS && pose.is_valid(1e-9);
    Ok(PoseEstimate {
        pose,
        inlier_mask: mask,
        success,
        iterations: it,
    })
}

pub fn pnp_ransac(
    corrs: &[(Keypoint2D, ScenePoint3D)],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate> {
    let bearings: Vec<BearingVector> = corrs.iter().map(|(kp, _)| bearing_from_pixel(k, kp)).collect();
    let points: Vec<Vector3<f64>> = corrs.iter().map(|(_, p)| p.position()).collect();
    pnp_ransac_bearings(&bearings, &points, cfg)
}
