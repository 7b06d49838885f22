use std::path::Path;

use a2_core::network::NetworkConfig;
use a2_core::pose::RansacConfig;
use a2_core::synth::SynthConfig;
use a2_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Number of scenes `a2 synth` writes.
    pub count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { count: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub samples: usize,
    pub n_points: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub d: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            n_points: 16,
            seed: 0,
            tolerance: 1e-3,
            d: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub synth: SynthConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub ransac: RansacConfig,
    pub gradcheck: GradCheckConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.ransac.validate()?;
        Ok(())
    }
}
