use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::metrics::{
    error_quantiles, mean_reprojection_error, reprojection_auc, rotation_error, translation_error,
    EvalSummary, AUC_THRESHOLDS,
};
use super::{pnp_ransac_bearings, RansacConfig};
use crate::correspondence::CorrespondenceSet;
use crate::error::{Error, Result};
use crate::geometry::{bearing_from_pixel, BearingVector, RigidPose};
use crate::network::{Mode, ModelWeights, Net};
use crate::outlier::{filter, CandidateBatch};
use crate::synth::{inject_outliers, ScenePair};
use crate::train::SceneSample;
use crate::transport::{mutual_nn, ScoreMatrix};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchOutput {
    pub initial: CorrespondenceSet,
    /// Inlier probability per initial correspondence.
    pub probs: Vec<f64>,
    pub final_set: CorrespondenceSet,
}

/// Network → Sinkhorn → mutual NN → classifier → threshold. With
/// `threshold = None` the classifier still runs but nothing is dropped.
pub fn match_scene(pair: &ScenePair, w: &ModelWeights, threshold: Option<f64>) -> Result<MatchOutput> {
    let sample = SceneSample::from_pair(pair)?;
    let mut net = Net::new(w, Mode::Eval);
    let (fp, fq) = net.features(&sample.inputs())?;
    let plan = net.match_plan(fp, fq)?;
    let initial = mutual_nn(&ScoreMatrix::new(net.tape.value(plan).clone(), false)?);
    let probs = if initial.is_empty() {
        Vec::new()
    } else {
        let kp = pair.keypoint_bearings();
        let pt = pair.point_bearings()?;
        let batch = CandidateBatch::from_matches(&initial, &kp, &pt)?;
        let p = net.classify(batch.rows(w.config.classifier_score_input))?;
        net.tape.value(p).data.clone()
    };
    let final_set = match threshold {
        Some(t) => filter(&initial, &probs, t)?,
        None => initial.clone(),
    };
    Ok(MatchOutput {
        initial,
        probs,
        final_set,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub success: bool,
    pub pose: Option<RigidPose>,
    pub n_correspondences: usize,
    pub n_inliers: usize,
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    /// Pixels; `+∞` on failure.
    pub reprojection_error: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl QueryResult {
    fn failed(n: usize, wall_seconds: f64) -> Self {
        Self {
            success: false,
            pose: None,
            n_correspondences: n,
            n_inliers: 0,
            rotation_error_deg: f64::INFINITY,
            translation_error: f64::INFINITY,
            reprojection_error: f64::INFINITY,
            wall_seconds,
        }
    }
}

/// PnP-RANSAC on `corrs` and errors against the scene's true pose.
pub fn localize(pair: &ScenePair, corrs: &CorrespondenceSet, cfg: &RansacConfig) -> Result<QueryResult> {
    let start = Instant::now();
    let n = corrs.len();
    if n < 4 {
        return Ok(QueryResult::failed(n, start.elapsed().as_secs_f64()));
    }
    let mut bearings: Vec<BearingVector> = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    for c in corrs.iter() {
        let kp = pair.keypoints.get(c.keypoint).ok_or(Error::IndexOutOfBounds {
            index: c.keypoint,
            len: pair.keypoints.len(),
        })?;
        let p = pair.points.get(c.point).ok_or(Error::IndexOutOfBounds {
            index: c.point,
            len: pair.points.len(),
        })?;
        bearings.push(bearing_from_pixel(&pair.intrinsics, kp));
        points.push(p.position());
    }
    let est = pnp_ransac_bearings(&bearings, &points, cfg)?;
    if !est.success {
        return Ok(QueryResult::failed(n, start.elapsed().as_secs_f64()));
    }
    let reproj = mean_reprojection_error(
        &pair.intrinsics,
        &est.pose,
        &pair.query_pose,
        corrs.iter().map(|c| &pair.points[c.point]),
    );
    Ok(QueryResult {
        success: true,
        n_correspondences: n,
        n_inliers: est.n_inliers(),
        rotation_error_deg: rotation_error(&est.pose, &pair.query_pose),
        translation_error: translation_error(&est.pose, &pair.query_pose),
        reprojection_error: reproj,
        pose: Some(est.pose),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn evaluate_queries(results: &[QueryResult]) -> Result<EvalSummary> {
    let reproj: Vec<f64> = results.iter().map(|r| r.reprojection_error).collect();
    let rot: Vec<f64> = results.iter().map(|r| r.rotation_error_deg).collect();
    let trans: Vec<f64> = results.iter().map(|r| r.translation_error).collect();
    let wall: Vec<f64> = results.iter().map(|r| r.wall_seconds).collect();
    let ok = results.iter().filter(|r| r.success).count();
    EvalSummary::from_errors(&reproj, &rot, &trans, ok, &wall)
}

/// Counts for precision and recall; add them up to pool over scenes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MatchStats {
    pub true_positives: usize,
    pub predicted: usize,
    pub ground_truth: usize,
}

impl MatchStats {
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.true_positives as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.ground_truth == 0 {
            0.0
        } else {
            self.true_positives as f64 / self.ground_truth as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

impl std::ops::Add for MatchStats {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            true_positives: self.true_positives + o.true_positives,
            predicted: self.predicted + o.predicted,
            ground_truth: self.ground_truth + o.ground_truth,
        }
    }
}

impl std::iter::Sum for MatchStats {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

pub fn correspondence_stats(pred: &CorrespondenceSet, pair: &ScenePair) -> MatchStats {
    MatchStats {
        true_positives: pred.true_positives(&pair.gt_matches, pair.keypoints.len()),
        predicted: pred.len(),
        ground_truth: pair.gt_matches.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub seeds: Vec<u64>,
    /// Filter threshold; `None` keeps every initial match.
    pub threshold: Option<f64>,
    /// Feed ground-truth correspondences instead of running the network.
    pub oracle: bool,
    pub ransac: RansacConfig,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            threshold: Some(crate::outlier::DEFAULT_THRESHOLD),
            oracle: false,
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub auc1: f64,
    pub auc5: f64,
    pub auc10: f64,
    pub n_queries: usize,
    pub median_rot_deg: f64,
    pub median_trans: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "ratio,auc1,auc5,auc10,n_queries,median_rot_deg,median_trans";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.ratio,
            self.auc1,
            self.auc5,
            self.auc10,
            self.n_queries,
            self.median_rot_deg,
            self.median_trans
        )
    }
}

fn cell_seed(seed: u64, scene: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(scene as u64)
}

/// For each ratio: inject outliers into every scene under every seed, run the
/// full pipeline and summarize with the reprojection AUC.
pub fn outlier_sweep(
    w: &ModelWeights,
    scenes: &[ScenePair],
    ratios: &[f64],
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("outlier sweep needs at least one scene"));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::InvalidConfig(format!("outlier ratio {r} outside [0, 1]")));
    }
    let cells: Vec<(u64, usize)> = opts
        .seeds
        .iter()
        .flat_map(|&s| (0..scenes.len()).map(move |i| (s, i)))
        .collect();
    ratios
        .iter()
        .map(|&ratio| {
            let results: Vec<QueryResult> = cells
                .par_iter()
                .map(|&(seed, i)| {
                    let cs = cell_seed(seed, i);
                    let pair = inject_outliers(&scenes[i], ratio, cs)?;
                    let corrs = if opts.oracle {
                        pair.gt_matches.clone()
                    } else {
                        match_scene(&pair, w, opts.threshold)?.final_set
                    };
                    let ransac = RansacConfig {
                        seed: opts.ransac.seed ^ cs,
                        ..opts.ransac.clone()
                    };
                    localize(&pair, &corrs, &ransac)
                })
                .collect::<Result<_>>()?;
            let reproj: Vec<f64> = results.iter().map(|r| r.reprojection_error).collect();
            let auc = reprojection_auc(&reproj, &AUC_THRESHOLDS);
            let rot: Vec<f64> = results.iter().map(|r| r.rotation_error_deg).collect();
            let trans: Vec<f64> = results.iter().map(|r| r.translation_error).collect();
            Ok(SweepRow {
                ratio,
                auc1: auc[0],
                auc5: auc[1],
                auc10: auc[2],
                n_queries: results.len(),
                median_rot_deg: error_quantiles(&rot, &[50.0])?[0],
                median_trans: error_quantiles(&trans, &[50.0])?[0],
            })
        })
        .collect()
}
