use indexmap::IndexMap;

use super::graph::{build_knn_graph_with, LocalGraph};
use super::{Modality, ModelWeights, ALPHA_BIN};
use crate::autodiff::channel_stats;
use crate::autodiff::{Fault, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::synth::ScenePair;

/// Train mode normalizes batch-norm layers with per-scene statistics and
/// reports them; eval mode uses running statistics when they exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a train pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Raw per-point network inputs for both sides.
#[derive(Debug, Clone, Copy)]
pub struct NetInputs<'a> {
    pub kp_bearings: &'a [[f64; 2]],
    pub kp_colors: &'a [[f64; 3]],
    pub pt_bearings: &'a [[f64; 2]],
    pub pt_colors: &'a [[f64; 3]],
}

/// One forward pass under construction: the tape plus the parameter leaves
/// created so far.
pub struct Net<'w> {
    pub tape: Tape,
    weights: &'w ModelWeights,
    vars: IndexMap<String, Var>,
    mode: Mode,
    pub updates: Vec<RunningUpdate>,
}

impl<'w> Net<'w> {
    pub fn new(weights: &'w ModelWeights, mode: Mode) -> Self {
        Self::with_fault(weights, mode, None)
    }

    pub fn with_fault(weights: &'w ModelWeights, mode: Mode, fault: Option<Fault>) -> Self {
        Self {
            tape: Tape::with_fault(fault),
            weights,
            vars: IndexMap::new(),
            mode,
            updates: Vec::new(),
        }
    }

    pub fn weights(&self) -> &ModelWeights {
        self.weights
    }

    /// Leaf for a named parameter, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self.weights.param(name)?.clone();
        let v = self.tape.param(t);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradient for every parameter; unused ones get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        self.weights
            .params
            .iter()
            .map(|(name, t)| {
                let g = match self.vars.get(name) {
                    Some(v) => grads.get(*v),
                    None => Tensor::zeros(t.shape.clone()),
                };
                (name.clone(), g)
            })
            .collect()
    }

    fn cfg(&self) -> &super::NetworkConfig {
        &self.weights.config
    }

    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bias(y, b)
    }

    fn affine(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        let y = self.tape.mul_channel(x, gamma)?;
        self.tape.add_bias(y, beta)
    }

    fn lrelu(&mut self, x: Var) -> Var {
        let slope = self.cfg().leaky_slope;
        self.tape.leaky_relu(x, slope)
    }

    /// Per-channel normalization over all points (and neighbors), then affine.
    pub fn instance_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let y = self.tape.normalize(x, self.cfg().norm_eps)?;
        self.affine(y, name)
    }

    pub fn batch_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let eps = self.cfg().norm_eps;
        let running = self.mode == Mode::Eval && self.weights.has_running_stats();
        let y = if running {
            let mean = self.buffer(&format!("{name}.running_mean"))?;
            let var = self.buffer(&format!("{name}.running_var"))?;
            let inv: Vec<f64> = var.data.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let shift: Vec<f64> = mean.data.iter().zip(&inv).map(|(m, s)| -m * s).collect();
            let width = inv.len();
            let scale = self.tape.constant(Tensor::new(vec![width], inv)?);
            let shift = self.tape.constant(Tensor::new(vec![width], shift)?);
            let y = self.tape.mul_channel(x, scale)?;
            self.tape.add_bias(y, shift)?
        } else {
            if self.mode == Mode::Train {
                let xv = self.tape.value(x);
                let (rows, cols) = (xv.rows(), xv.cols());
                let (mean, var) = channel_stats(&xv.data, rows, cols);
                let unbias = if rows > 1 {
                    rows as f64 / (rows - 1) as f64
                } else {
                    1.0
                };
                self.updates.push(RunningUpdate {
                    layer: name.to_string(),
                    mean,
                    var: var.iter().map(|v| v * unbias).collect(),
                });
            }
            self.tape.normalize(x, eps)?
        };
        self.affine(y, name)
    }

    fn buffer(&self, name: &str) -> Result<&'w Tensor> {
        self.weights
            .buffers
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    fn rows_tensor<const W: usize>(rows: &[[f64; W]]) -> Tensor {
        Tensor {
            shape: vec![rows.len(), W],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    /// `F_b(b) + F_c(c)`, each an input projection plus residual units.
    pub fn encode(
        &mut self,
        bearings: &[[f64; 2]],
        colors: &[[f64; 3]],
        modality: Modality,
    ) -> Result<Var> {
        if bearings.is_empty() {
            return Err(Error::EmptyInput("encode needs at least one point"));
        }
        if bearings.len() != colors.len() {
            return Err(Error::LengthMismatch {
                left: bearings.len(),
                right: colors.len(),
            });
        }
        let prefix = self.cfg().encoder_prefix(modality);
        let b = self.tape.constant(Self::rows_tensor(bearings));
        let c = self.tape.constant(Self::rows_tensor(colors));
        let fb = self.residual_stack(b, &format!("{prefix}.bearing"))?;
        let fc = self.residual_stack(c, &format!("{prefix}.color"))?;
        self.tape.add(fb, fc)
    }

    fn residual_stack(&mut self, x: Var, base: &str) -> Result<Var> {
        let mut h = self.linear(x, &format!("{base}.in"))?;
        for u in 0..self.cfg().encoder_units {
            let y = self.linear(h, &format!("{base}.res{u}.lin"))?;
            let y = self.instance_norm(y, &format!("{base}.res{u}.norm"))?;
            let y = self.lrelu(y);
            h = self.tape.add(h, y)?;
        }
        Ok(h)
    }

    /// `e_ij = [f_i, f_i − f_j]` laid out as `N×k×2d`.
    pub fn edge_features(&mut self, f: Var, graph: &LocalGraph) -> Result<Var> {
        let (n, d) = (self.tape.value(f).rows(), self.tape.value(f).cols());
        if graph.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "graph over {} points, features for {n}",
                graph.len()
            )));
        }
        let k = graph.k;
        let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let center = self.tape.gather_rows(f, &centers)?;
        let nbr = self.tape.gather_rows(f, &graph.neighbor_idx)?;
        let diff = self.tape.sub(center, nbr)?;
        let e = self.tape.concat(&[center, diff])?;
        self.tape.reshape(e, vec![n, k, 2 * d])
    }

    /// `max_j LeakyReLU(IN(h_θ(e_ij)))`.
    pub fn maxpool_aggregate(&mut self, e: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(e, &format!("{prefix}.h"))?;
        let h = self.instance_norm(h, &format!("{prefix}.h_norm"))?;
        let h = self.lrelu(h);
        Ok(self.tape.max_axis(h, 1)?.0)
    }

    /// Non-overlapping convolution along the neighbor axis:
    /// `N×k×c → N×(k/width)×d′`.
    pub fn grouped_conv(&mut self, x: Var, width: usize, name: &str) -> Result<Var> {
        let shape = self.tape.shape(x).to_vec();
        if shape.len() != 3 || width == 0 || !shape[1].is_multiple_of(width) {
            return Err(Error::ShapeMismatch(format!(
                "grouped conv of width {width} over {shape:?}"
            )));
        }
        let (n, k, c) = (shape[0], shape[1], shape[2]);
        let groups = k / width;
        let flat = self.tape.reshape(x, vec![n * groups, width * c])?;
        let y = self.linear(flat, name)?;
        let out = self.tape.value(y).cols();
        self.tape.reshape(y, vec![n, groups, out])
    }

    /// Two grouped convolutions, each followed by batch norm and ReLU:
    /// the first collapses each distance group, the second the groups.
    fn annular(&mut self, x: Var, first: &str, second: &str) -> Result<Var> {
        let (k, g) = (self.cfg().k, self.cfg().g);
        if self.tape.shape(x).get(1) != Some(&k) {
            return Err(Error::ShapeMismatch(format!(
                "annular input {:?} needs {k} neighbors",
                self.tape.shape(x)
            )));
        }
        let y = self.grouped_conv(x, k / g, first)?;
        let y = self.batch_norm(y, &format!("{first}_bn"))?;
        let y = self.tape.relu(y);
        let y = self.grouped_conv(y, g, second)?;
        let y = self.batch_norm(y, &format!("{second}_bn"))?;
        let y = self.tape.relu(y);
        let n = self.tape.shape(y)[0];
        let d = self.tape.shape(y)[2];
        self.tape.reshape(y, vec![n, d])
    }

    pub fn annular_aggregate(&mut self, e: Var, prefix: &str) -> Result<Var> {
        self.annular(e, &format!("{prefix}.g1"), &format!("{prefix}.g2"))
    }

    pub fn angle_aggregate(&mut self, graph: &LocalGraph, prefix: &str) -> Result<Var> {
        let cos = Tensor::new(vec![graph.len(), graph.k, 1], graph.neighbor_cos.clone())?;
        let x = self.tape.constant(cos);
        self.annular(x, &format!("{prefix}.g3"), &format!("{prefix}.g4"))
    }

    /// Two aggregation rounds; the max stream and the angle-annular stream
    /// each rebuild edge features from their own previous output.
    pub fn self_attention_block(&mut self, f: Var, graph: &LocalGraph, prefix: &str) -> Result<Var> {
        let mut max_in = f;
        let mut aa_in = f;
        let mut max_out = Vec::with_capacity(2);
        let mut aa_out = Vec::with_capacity(2);
        for r in 1..=2 {
            let p = format!("{prefix}.r{r}");
            let e = self.edge_features(max_in, graph)?;
            let fmax = self.maxpool_aggregate(e, &p)?;
            let e = if aa_in == max_in {
                e
            } else {
                self.edge_features(aa_in, graph)?
            };
            let fann = self.annular_aggregate(e, &p)?;
            let fang = self.angle_aggregate(graph, &p)?;
            let faa = self.tape.add(fann, fang)?;
            max_out.push(fmax);
            aa_out.push(faa);
            max_in = fmax;
            aa_in = faa;
        }
        let cat_max = self.tape.concat(&[f, max_out[0], max_out[1]])?;
        let cat_aa = self.tape.concat(&[f, aa_out[0], aa_out[1]])?;
        let a = self.head(cat_max, &format!("{prefix}.h1"))?;
        let b = self.head(cat_aa, &format!("{prefix}.h2"))?;
        self.tape.add(a, b)
    }

    fn head(&mut self, x: Var, name: &str) -> Result<Var> {
        let y = self.linear(x, name)?;
        let y = self.instance_norm(y, &format!("{name}_norm"))?;
        Ok(self.lrelu(y))
    }

    /// Rows of `fa` attend over `fb`; returns `fa + MLP([q, m])`.
    pub fn cross_attention(&mut self, fa: Var, fb: Var, prefix: &str) -> Result<Var> {
        let d = self.tape.value(fa).cols();
        if self.tape.value(fb).cols() != d {
            return Err(Error::ShapeMismatch(format!(
                "cross attention widths {d} and {}",
                self.tape.value(fb).cols()
            )));
        }
        let (alpha, q, v) = self.attention(fa, fb, prefix)?;
        let m = self.tape.matmul_set(alpha, v)?;
        let cat = self.tape.concat(&[q, m])?;
        let h = self.linear(cat, &format!("{prefix}.mlp1"))?;
        let h = self.lrelu(h);
        let h = self.linear(h, &format!("{prefix}.mlp2"))?;
        self.tape.add(fa, h)
    }

    /// Attention weights `softmax(q kᵀ/√d)` along with `q` and `v`.
    pub fn attention(&mut self, fa: Var, fb: Var, prefix: &str) -> Result<(Var, Var, Var)> {
        let d = self.tape.value(fa).cols();
        let q = self.linear(fa, &format!("{prefix}.wq"))?;
        let k = self.linear(fb, &format!("{prefix}.wk"))?;
        let v = self.linear(fb, &format!("{prefix}.wv"))?;
        let s = self.tape.matmul_nt(q, k)?;
        let s = self.tape.scale(s, 1.0 / (d as f64).sqrt());
        Ok((self.tape.softmax(s), q, v))
    }

    /// Enhanced features for both sides.
    pub fn features(&mut self, inputs: &NetInputs<'_>) -> Result<(Var, Var)> {
        let cfg = self.cfg().clone();
        let gp = build_knn_graph_with(inputs.kp_bearings, cfg.k, cfg.angle_convention)?;
        let gq = build_knn_graph_with(inputs.pt_bearings, cfg.k, cfg.angle_convention)?;
        let mut fp = self.encode(inputs.kp_bearings, inputs.kp_colors, Modality::Keypoints)?;
        let mut fq = self.encode(inputs.pt_bearings, inputs.pt_colors, Modality::Points)?;
        for blk in 0..cfg.n_blocks {
            fp = self.self_attention_block(fp, &gp, &format!("blk{blk}.self.kp"))?;
            fq = self.self_attention_block(fq, &gq, &format!("blk{blk}.self.pt"))?;
            let np = self.cross_attention(fp, fq, &format!("blk{blk}.cross.kp"))?;
            let nq = self.cross_attention(fq, fp, &format!("blk{blk}.cross.pt"))?;
            fp = np;
            fq = nq;
        }
        Ok((fp, fq))
    }

    /// Dustbin-augmented Sinkhorn plan from L2 feature distances.
    pub fn match_plan(&mut self, fp: Var, fq: Var) -> Result<Var> {
        let cost = self.tape.pairwise_dist(fp, fq)?;
        let alpha = self.p(ALPHA_BIN)?;
        let scores = self.tape.dustbins(cost, alpha)?;
        let iters = self.cfg().sinkhorn_iters;
        self.tape.sinkhorn(scores, iters)
    }

    /// Inlier probabilities for candidate rows `[b_p, b_q(, score)]`.
    pub fn classify(&mut self, rows: Tensor) -> Result<Var> {
        if rows.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        let want = self.cfg().classifier_input_width();
        if rows.cols() != want {
            return Err(Error::ShapeMismatch(format!(
                "classifier expects width {want}, got {:?}",
                rows.shape
            )));
        }
        let x = self.tape.constant(rows);
        let mut h = self.linear(x, "or.in")?;
        for u in 0..self.cfg().classifier_units {
            let p = format!("or.res{u}");
            let y = self.linear(h, &format!("{p}.lin1"))?;
            let y = self.instance_norm(y, &format!("{p}.cn1"))?;
            let y = self.tape.relu(y);
            let y = self.linear(y, &format!("{p}.lin2"))?;
            let y = self.instance_norm(y, &format!("{p}.cn2"))?;
            let y = self.tape.relu(y);
            h = self.tape.add(h, y)?;
        }
        let logit = self.linear(h, "or.head")?;
        Ok(self.tape.sigmoid(logit))
    }
}

impl ModelWeights {
    /// Fold per-scene batch statistics into the running estimates, in order.
    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate]) {
        if updates.is_empty() {
            return;
        }
        self.init_running_stats();
        let m = self.config.bn_momentum;
        for u in updates {
            for (key, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                if let Some(t) = self.buffers.get_mut(&format!("{}.{key}", u.layer)) {
                    for (r, b) in t.data.iter_mut().zip(batch.iter()) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                }
            }
        }
    }
}

/// Eval-mode enhanced features `(f_p, f_q)`.
pub fn forward(inputs: &NetInputs<'_>, w: &ModelWeights) -> Result<(Tensor, Tensor)> {
    let mut net = Net::new(w, Mode::Eval);
    let (fp, fq) = net.features(inputs)?;
    Ok((net.tape.value(fp).clone(), net.tape.value(fq).clone()))
}

pub fn forward_pair(pair: &ScenePair, w: &ModelWeights) -> Result<(Tensor, Tensor)> {
    let kp: Vec<[f64; 2]> = pair.keypoint_bearings().iter().map(|b| b.as_array()).collect();
    let pt: Vec<[f64; 2]> = pair.point_bearings()?.iter().map(|b| b.as_array()).collect();
    let (kc, pc) = (pair.keypoint_colors(), pair.point_colors());
    forward(
        &NetInputs {
            kp_bearings: &kp,
            kp_colors: &kc,
            pt_bearings: &pt,
            pt_colors: &pc,
        },
        w,
    )
}
