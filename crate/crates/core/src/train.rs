//! Losses, Adam, the training loop and the finite-difference gradient audit.

use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Fault, Tape, Tensor, Var};
use crate::correspondence::CorrespondenceSet;
use crate::error::{Error, Result};
use crate::geometry::BearingVector;
use crate::network::{Mode, ModelWeights, Net, NetInputs, NetworkConfig, RunningUpdate};
use crate::outlier::{balance_weights, CandidateBatch};
use crate::synth::ScenePair;
use crate::transport::{mutual_nn, ScoreMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub matching_weight: f64,
    pub rejection_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            matching_weight: 1.0,
            rejection_weight: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.matching_weight >= 0.0 && self.rejection_weight >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossReport {
    pub matching_loss: f64,
    pub rejection_loss: f64,
    pub total: f64,
    /// Target cells of the matching loss.
    pub n_m: usize,
    /// Initial correspondences fed to the classifier.
    pub n_c: usize,
}

/// Flat indices into the `(M+1)×(N+1)` plan: ground-truth cells, then the
/// dustbin cells of unmatched keypoints, then those of unmatched points.
pub fn matching_cells(gt: &CorrespondenceSet, m: usize, n: usize) -> Result<Vec<usize>> {
    let cols = n + 1;
    let mut kp_used = vec![false; m];
    let mut pt_used = vec![false; n];
    let mut cells = Vec::with_capacity(m + n);
    for c in gt.iter() {
        if c.keypoint >= m {
            return Err(Error::IndexOutOfBounds {
                index: c.keypoint,
                len: m,
            });
        }
        if c.point >= n {
            return Err(Error::IndexOutOfBounds {
                index: c.point,
                len: n,
            });
        }
        kp_used[c.keypoint] = true;
        pt_used[c.point] = true;
        cells.push(c.keypoint * cols + c.point);
    }
    cells.extend((0..m).filter(|i| !kp_used[*i]).map(|i| i * cols + n));
    cells.extend((0..n).filter(|j| !pt_used[*j]).map(|j| m * cols + j));
    Ok(cells)
}

/// Negative mean log-probability of the target cells.
pub fn matching_loss(plan: &ScoreMatrix, gt: &CorrespondenceSet, m: usize, n: usize) -> Result<f64> {
    if plan.m() != m || plan.n() != n {
        return Err(Error::ShapeMismatch(format!(
            "plan is {}x{}, expected {m}x{n} before dustbins",
            plan.m(),
            plan.n()
        )));
    }
    let cells = matching_cells(gt, m, n)?;
    let mut tape = Tape::new();
    let p = tape.constant(plan.values.clone());
    let l = tape.matching_nll(p, &cells)?;
    Ok(tape.value(l).item())
}

/// Weighted binary cross-entropy averaged over the candidates.
pub fn rejection_loss(probs: &[f64], labels: &[f64], weights: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor {
        shape: vec![probs.len()],
        data: probs.to_vec(),
    });
    let l = tape.weighted_bce(p, labels, weights)?;
    Ok(tape.value(l).item())
}

/// Network inputs extracted once per scene.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub kp_bearings: Vec<[f64; 2]>,
    pub kp_colors: Vec<[f64; 3]>,
    pub pt_bearings: Vec<[f64; 2]>,
    pub pt_colors: Vec<[f64; 3]>,
    pub gt: CorrespondenceSet,
}

impl SceneSample {
    pub fn from_pair(pair: &ScenePair) -> Result<Self> {
        Ok(Self {
            kp_bearings: pair.keypoint_bearings().iter().map(|b| b.as_array()).collect(),
            kp_colors: pair.keypoint_colors(),
            pt_bearings: pair.point_bearings()?.iter().map(|b| b.as_array()).collect(),
            pt_colors: pair.point_colors(),
            gt: pair.gt_matches.clone(),
        })
    }

    pub fn inputs(&self) -> NetInputs<'_> {
        NetInputs {
            kp_bearings: &self.kp_bearings,
            kp_colors: &self.kp_colors,
            pt_bearings: &self.pt_bearings,
            pt_colors: &self.pt_colors,
        }
    }

    fn bearings(v: &[[f64; 2]]) -> Vec<BearingVector> {
        v.iter().map(|b| BearingVector::new(b[0], b[1])).collect()
    }
}

/// Recorded full-pipeline loss for one scene.
pub struct SceneLoss<'w> {
    pub net: Net<'w>,
    pub loss: Var,
    pub report: LossReport,
    /// Candidates chosen by mutual nearest neighbors on the plan.
    pub candidates: CorrespondenceSet,
}

/// forward → Sinkhorn → matching loss; mutual NN → classifier → rejection
/// loss. `fixed_candidates` pins the discrete candidate selection.
pub fn scene_loss<'w>(
    w: &'w ModelWeights,
    sample: &SceneSample,
    cfg: &TrainConfig,
    fault: Option<Fault>,
    fixed_candidates: Option<&CorrespondenceSet>,
) -> Result<SceneLoss<'w>> {
    let mut net = Net::with_fault(w, Mode::Train, fault);
    let (m, n) = (sample.kp_bearings.len(), sample.pt_bearings.len());
    let (fp, fq) = net.features(&sample.inputs())?;
    let plan = net.match_plan(fp, fq)?;
    let cells = matching_cells(&sample.gt, m, n)?;
    let lm = net.tape.matching_nll(plan, &cells)?;

    let candidates = match fixed_candidates {
        Some(c) => c.clone(),
        None => mutual_nn(&ScoreMatrix::new(net.tape.value(plan).clone(), false)?),
    };
    let mut report = LossReport {
        matching_loss: net.tape.value(lm).item(),
        n_m: cells.len(),
        n_c: candidates.len(),
        ..LossReport::default()
    };
    let mut loss = net.tape.scale(lm, cfg.matching_weight);
    if !candidates.is_empty() {
        let batch = CandidateBatch::from_matches(
            &candidates,
            &SceneSample::bearings(&sample.kp_bearings),
            &SceneSample::bearings(&sample.pt_bearings),
        )?;
        let labels: Vec<f64> = candidates
            .iter()
            .map(|c| f64::from(u8::from(sample.gt.contains_pair(c.keypoint, c.point))))
            .collect();
        let weights = balance_weights(&labels);
        let probs = net.classify(batch.rows(w.config.classifier_score_input))?;
        let lor = net.tape.weighted_bce(probs, &labels, &weights)?;
        report.rejection_loss = net.tape.value(lor).item();
        let lor = net.tape.scale(lor, cfg.rejection_weight);
        loss = net.tape.add(loss, lor)?;
    }
    report.total = net.tape.value(loss).item();
    Ok(SceneLoss {
        net,
        loss,
        report,
        candidates,
    })
}

/// Loss report, parameter gradients and batch-norm statistics of one scene.
pub fn scene_gradients(
    w: &ModelWeights,
    sample: &SceneSample,
    cfg: &TrainConfig,
) -> Result<(LossReport, IndexMap<String, Tensor>, Vec<RunningUpdate>)> {
    let s = scene_loss(w, sample, cfg, None, None)?;
    let grads = s.net.tape.backward(s.loss)?;
    let g = s.net.param_grads(&grads);
    Ok((s.report, g, s.net.updates))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

pub fn adam_step(
    weights: &mut ModelWeights,
    grads: &IndexMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, param) in weights.params.iter_mut() {
        let Some(g) = grads.get(name) else {
            continue;
        };
        if g.len() != param.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {name} has {} entries, parameter {}",
                g.len(),
                param.len()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            let gi = g.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param.data[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub matching_loss: f64,
    pub rejection_loss: f64,
    pub total: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub log: Vec<EpochLog>,
}

/// Fresh weights seeded from `cfg.seed`, then [`train_from`].
pub fn train(
    dataset: &[ScenePair],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let weights = ModelWeights::init(net_cfg, cfg.seed)?;
    train_from(weights, dataset, cfg, |_| {})
}

/// Mini-batch Adam over the dataset. Scenes of a batch are evaluated in
/// parallel; gradients are averaged in batch order, so the result does not
/// depend on the worker count.
pub fn train_from(
    mut weights: ModelWeights,
    dataset: &[ScenePair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training needs at least one scene"));
    }
    let samples: Vec<SceneSample> = dataset
        .iter()
        .map(SceneSample::from_pair)
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut state = AdamState::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| scene_gradients(&weights, &samples[i], cfg))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut mean: IndexMap<String, Tensor> = weights
                .params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape.clone())))
                .collect();
            let mut updates = Vec::new();
            for (report, grads, ups) in results {
                sums[0] += report.matching_loss;
                sums[1] += report.rejection_loss;
                sums[2] += report.total;
                for (name, g) in grads {
                    let acc = &mut mean[&name];
                    acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b * scale);
                }
                updates.extend(ups);
            }
            adam_step(&mut weights, &mean, &mut state, cfg)?;
            weights.apply_running_updates(&updates);
        }
        let n = samples.len() as f64;
        let entry = EpochLog {
            epoch,
            matching_loss: sums[0] / n,
            rejection_loss: sums[1] / n,
            total: sums[2] / n,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { weights, log })
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub module: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub max_abs_diff: f64,
    /// Worst relative error per module group.
    pub per_module: IndexMap<String, f64>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Coarse module group of a parameter name.
pub fn module_of(name: &str) -> &'static str {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["enc", ..] => "encoder",
        ["match", ..] => "dustbin",
        ["or", ..] => "classifier",
        [_, "cross", ..] => "cross_attention",
        [_, "self", _, round, layer, ..] if round.starts_with('r') => {
            match layer.split('_').next().unwrap_or("") {
                "h" => "maxpool",
                "g1" | "g2" => "annular",
                "g3" | "g4" => "angle",
                _ => "self_attention",
            }
        }
        [_, "self", ..] => "self_attention",
        _ => "other",
    }
}

/// `|a − n| ≤ floor` passes outright; otherwise `|a − n| / max(|a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= GRAD_CHECK_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compare analytic gradients of the full training loss against central
/// differences on `sample` parameter entries spread evenly over the module
/// groups. The candidate set is frozen at the unperturbed solution.
pub fn grad_check(
    scene: &ScenePair,
    w: &ModelWeights,
    sample: usize,
    seed: u64,
    fault: Option<Fault>,
) -> Result<GradCheckReport> {
    let cfg = TrainConfig::default();
    let data = SceneSample::from_pair(scene)?;
    let base = scene_loss(w, &data, &cfg, fault, None)?;
    let grads = base.net.tape.backward(base.loss)?;
    let analytic = base.net.param_grads(&grads);
    let frozen = base.candidates.clone();

    let mut groups: IndexMap<&'static str, Vec<&String>> = IndexMap::new();
    for name in w.params.keys() {
        groups.entry(module_of(name)).or_default().push(name);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(String, usize)> = Vec::with_capacity(sample);
    let keys: Vec<&'static str> = groups.keys().copied().collect();
    for s in 0..sample {
        let names = &groups[keys[s % keys.len()]];
        let name = *names.choose(&mut rng).expect("groups are non-empty");
        let index = rng.random_range(0..w.params[name].len());
        picks.push((name.clone(), index));
    }

    let eval = |w: &ModelWeights| -> Result<f64> {
        Ok(scene_loss(w, &data, &cfg, None, Some(&frozen))?.report.total)
    };
    let checks: Vec<ParamCheck> = picks
        .par_iter()
        .map(|(name, index)| {
            let mut plus = w.clone();
            plus.params[name].data[*index] += GRAD_CHECK_STEP;
            let mut minus = w.clone();
            minus.params[name].data[*index] -= GRAD_CHECK_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[name].data[*index];
            Ok(ParamCheck {
                name: name.clone(),
                index: *index,
                module: module_of(name).to_string(),
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            })
        })
        .collect::<Result<_>>()?;

    let mut per_module: IndexMap<String, f64> = IndexMap::new();
    for c in &checks {
        let e = per_module.entry(c.module.clone()).or_insert(0.0);
        *e = e.max(c.rel_err);
    }
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let max_abs_diff = checks.iter().map(|c| (c.analytic - c.numeric).abs()).fold(0.0, f64::max);
    Ok(GradCheckReport {
        checks,
        max_rel_err,
        max_abs_diff,
        per_module,
    })
}
