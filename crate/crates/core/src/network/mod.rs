//! Encoder, angle-annular self-attention and cross-attention.

mod graph;
mod layers;

pub use graph::{build_knn_graph, build_knn_graph_with, AngleConvention, LocalGraph};
pub use layers::{forward, forward_pair, Mode, Net, NetInputs, RunningUpdate};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::transport::DEFAULT_DUSTBIN_SCORE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub d: usize,
    pub k: usize,
    pub g: usize,
    pub n_blocks: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
    pub bn_momentum: f64,
    pub encoder_units: usize,
    pub classifier_units: usize,
    /// Use one encoder for both modalities.
    pub share_encoder: bool,
    /// Append the transport score as a fifth classifier input.
    pub classifier_score_input: bool,
    pub angle_convention: AngleConvention,
    pub sinkhorn_iters: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            d: 128,
            k: 9,
            g: 3,
            n_blocks: 2,
            leaky_slope: 0.2,
            norm_eps: 1e-5,
            bn_momentum: 0.1,
            encoder_units: 3,
            classifier_units: 6,
            share_encoder: false,
            classifier_score_input: false,
            angle_convention: AngleConvention::NearestNeighbor,
            sinkhorn_iters: crate::transport::DEFAULT_SINKHORN_ITERS,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d < 4 {
            return bad(format!("d must be at least 4, got {}", self.d));
        }
        if self.g == 0 || self.k == 0 || !self.k.is_multiple_of(self.g) {
            return bad(format!("k ({}) must be a positive multiple of g ({})", self.k, self.g));
        }
        if self.n_blocks == 0 {
            return bad("n_blocks must be at least 1".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope must lie in (0, 1)".into());
        }
        if !(self.norm_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("norm_eps must be positive and bn_momentum in [0, 1]".into());
        }
        if self.sinkhorn_iters == 0 {
            return bad("sinkhorn_iters must be at least 1".into());
        }
        Ok(())
    }

    pub fn classifier_input_width(&self) -> usize {
        if self.classifier_score_input {
            5
        } else {
            4
        }
    }

    fn encoder_prefix(&self, modality: Modality) -> &'static str {
        match (self.share_encoder, modality) {
            (true, _) => "enc.shared",
            (false, Modality::Keypoints) => "enc.kp",
            (false, Modality::Points) => "enc.pt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Keypoints,
    Points,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Keypoints => "kp",
            Modality::Points => "pt",
        }
    }
}

/// Kind of a parameter tensor, which decides its initial value.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
    Const(f64),
}

/// Every learnable tensor plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: NetworkConfig,
    pub params: IndexMap<String, Tensor>,
    /// `<bn>.running_mean` / `<bn>.running_var`, present once trained.
    pub buffers: IndexMap<String, Tensor>,
}

pub const ALPHA_BIN: &str = "match.alpha_bin";

struct Builder<'a> {
    cfg: &'a NetworkConfig,
    specs: Vec<(String, Vec<usize>, Init)>,
    bns: Vec<(String, usize)>,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push((name, shape, init));
    }

    fn linear(&mut self, name: &str, fan_in: usize, out: usize) {
        self.tensor(format!("{name}.w"), vec![fan_in, out], Init::Kaiming { fan_in });
        self.tensor(format!("{name}.b"), vec![out], Init::Zeros);
    }

    fn affine(&mut self, name: &str, width: usize) {
        self.tensor(format!("{name}.gamma"), vec![width], Init::Ones);
        self.tensor(format!("{name}.beta"), vec![width], Init::Zeros);
    }

    fn batch_norm(&mut self, name: &str, width: usize) {
        self.affine(name, width);
        self.bns.push((name.to_string(), width));
    }

    fn encoder(&mut self, prefix: &str) {
        let d = self.cfg.d;
        for (channel, width) in [("bearing", 2), ("color", 3)] {
            let base = format!("{prefix}.{channel}");
            self.linear(&format!("{base}.in"), width, d);
            for u in 0..self.cfg.encoder_units {
                self.linear(&format!("{base}.res{u}.lin"), d, d);
                self.affine(&format!("{base}.res{u}.norm"), d);
            }
        }
    }

    fn self_attention(&mut self, prefix: &str) {
        let NetworkConfig { d, k, g, .. } = *self.cfg;
        let width = k / g;
        for r in 1..=2 {
            let p = format!("{prefix}.r{r}");
            self.linear(&format!("{p}.h"), 2 * d, d);
            self.affine(&format!("{p}.h_norm"), d);
            for (name, fan_in) in [
                ("g1", width * 2 * d),
                ("g2", g * d),
                ("g3", width),
                ("g4", g * d),
            ] {
                self.linear(&format!("{p}.{name}"), fan_in, d);
                self.batch_norm(&format!("{p}.{name}_bn"), d);
            }
        }
        for head in ["h1", "h2"] {
            self.linear(&format!("{prefix}.{head}"), 3 * d, d);
            self.affine(&format!("{prefix}.{head}_norm"), d);
        }
    }

    fn cross_attention(&mut self, prefix: &str) {
        let d = self.cfg.d;
        for w in ["wq", "wk", "wv"] {
            self.linear(&format!("{prefix}.{w}"), d, d);
        }
        self.linear(&format!("{prefix}.mlp1"), 2 * d, 2 * d);
        self.linear(&format!("{prefix}.mlp2"), 2 * d, d);
    }

    fn classifier(&mut self) {
        let d = self.cfg.d;
        self.linear("or.in", self.cfg.classifier_input_width(), d);
        for u in 0..self.cfg.classifier_units {
            let p = format!("or.res{u}");
            self.linear(&format!("{p}.lin1"), d, d);
            self.affine(&format!("{p}.cn1"), d);
            self.linear(&format!("{p}.lin2"), d, d);
            self.affine(&format!("{p}.cn2"), d);
        }
        self.linear("or.head", d, 1);
    }
}

fn layout(cfg: &NetworkConfig) -> Builder<'_> {
    let mut b = Builder {
        cfg,
        specs: Vec::new(),
        bns: Vec::new(),
    };
    if cfg.share_encoder {
        b.encoder("enc.shared");
    } else {
        b.encoder("enc.kp");
        b.encoder("enc.pt");
    }
    for blk in 0..cfg.n_blocks {
        for m in ["kp", "pt"] {
            b.self_attention(&format!("blk{blk}.self.{m}"));
        }
        for m in ["kp", "pt"] {
            b.cross_attention(&format!("blk{blk}.cross.{m}"));
        }
    }
    b.tensor(ALPHA_BIN.into(), vec![1], Init::Const(DEFAULT_DUSTBIN_SCORE));
    b.classifier();
    b
}

impl ModelWeights {
    /// Kaiming-uniform weights, zero biases, unit/zero norm affines.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for (name, shape, init) in layout(cfg).specs {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Kaiming { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(c) => vec![c; n],
            };
            params.insert(name, Tensor { shape, data });
        }
        Ok(Self {
            config: cfg.clone(),
            params,
            buffers: IndexMap::new(),
        })
    }

    pub fn has_running_stats(&self) -> bool {
        !self.buffers.is_empty()
    }

    /// Names and widths of every batch-norm layer.
    pub fn batch_norm_layers(&self) -> Vec<(String, usize)> {
        layout(&self.config).bns
    }

    /// Running statistics at their conventional starting point (0, 1).
    pub fn init_running_stats(&mut self) {
        for (name, width) in self.batch_norm_layers() {
            self.buffers
                .entry(format!("{name}.running_mean"))
                .or_insert_with(|| Tensor::zeros(vec![width]));
            self.buffers
                .entry(format!("{name}.running_var"))
                .or_insert_with(|| Tensor::filled(vec![width], 1.0));
        }
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn alpha_bin(&self) -> f64 {
        self.params.get(ALPHA_BIN).map_or(DEFAULT_DUSTBIN_SCORE, |t| t.data[0])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Checks names and shapes against the layout implied by `config`.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let b = layout(&self.config);
        if b.specs.len() != self.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                b.specs.len(),
                self.params.len()
            )));
        }
        for (name, shape, _) in &b.specs {
            let t = self.param(name)?;
            if &t.shape != shape {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    t.shape
                )));
            }
        }
        Ok(())
    }

    /// Exchange the keypoint and point parameter sets.
    pub fn swap_modalities(&self) -> Self {
        let swap = |name: &str| -> String {
            let mut parts: Vec<&str> = name.split('.').collect();
            for p in parts.iter_mut() {
                *p = match *p {
                    "kp" => "pt",
                    "pt" => "kp",
                    other => other,
                };
            }
            parts.join(".")
        };
        let remap = |m: &IndexMap<String, Tensor>| -> IndexMap<String, Tensor> {
            m.keys()
                .map(|k| (k.clone(), m[&swap(k)].clone()))
                .collect()
        };
        Self {
            config: self.config.clone(),
            params: remap(&self.params),
            buffers: remap(&self.buffers),
        }
    }
}
