//! Run configuration file (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use deeppce::{ModelConfig, PolyFamily, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Input variables per leaf scope.
    pub scope_size: usize,
    /// Total-order truncation of each leaf expansion.
    pub max_order: usize,
    /// Sum nodes per region.
    #[serde(alias = "n_nodes")]
    pub num_sums: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

fn default_bn_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Tensor file, or CSV when the extension is `.csv`.
    pub path: Option<PathBuf>,
    /// Input marginals for CSV data, e.g. `["uniform(1,2)"]`; a single
    /// entry applies to every column.
    #[serde(default)]
    pub marginals: Vec<String>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_val_fraction() -> f64 {
    0.2
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            marginals: Vec::new(),
            val_fraction: default_val_fraction(),
            test_fraction: 0.0,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|m| CliError::Config(format!("{}: {m}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }

    pub fn model_config(&self, d_in: usize, d_out: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            bn_eps: m.bn_eps,
            ..ModelConfig::new(d_in, d_out, m.scope_size, m.max_order, m.num_sums, m.seed)
        }
    }

    pub fn marginals(&self) -> Result<Vec<PolyFamily>, CliError> {
        self.data
            .marginals
            .iter()
            .map(|s| s.parse::<PolyFamily>().map_err(CliError::from))
            .collect()
    }

    /// `[train, validation, test]` split fractions.
    pub fn fractions(&self) -> Result<[f64; 3], CliError> {
        let (v, t) = (self.data.val_fraction, self.data.test_fraction);
        if !(v > 0.0 && t >= 0.0 && v + t < 1.0) {
            return Err(CliError::Config(format!(
                "validation fraction {v} and test fraction {t} must leave a non-empty training set"
            )));
        }
        Ok([1.0 - v - t, v, t])
    }
}
