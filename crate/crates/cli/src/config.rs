//! Run configuration: one JSON file describing data, model, training, and
//! experiment selections; command-line flags override single fields.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vital_core::dataset::{PartitionConfig, PsvOptions, SyntheticConfig};
use vital_core::model::ModelConfig;
use vital_core::train::TrainConfig;

use crate::CliError;

/// Where the records come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generate on the fly from the synthetic spec.
    Synthetic(SyntheticConfig),
    /// Ingest a directory of pipe-separated per-patient files.
    PsvDir {
        path: PathBuf,
        #[serde(default)]
        options: PsvOptions,
    },
    /// A bundle previously written by `synth` or `ingest`.
    Bundle { manifest: PathBuf, records: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Experiment seed: drives the split, the head initialization, and the
    /// batch order. The synthetic generation seed lives in `data`.
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Removal ratios for the robustness protocol.
    pub ratios: Vec<f64>,
    /// Seeds for the multi-seed ablations.
    pub ablation_seeds: Vec<u64>,
    /// Sentinel words compared by the word ablation.
    pub ablation_words: Vec<String>,
    /// Root under which run directories are created; flag and environment
    /// variable take precedence.
    pub output_root: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            val_fraction: 0.15,
            test_fraction: 0.15,
            ratios: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            ablation_seeds: vec![0, 1, 2, 3, 4],
            ablation_words: vec![
                "Missing".to_string(),
                "Null".to_string(),
                "Apple".to_string(),
                "Engineering".to_string(),
            ],
            output_root: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let body = fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: Self = serde_json::from_str(&body).map_err(|e| {
            CliError::Validation(format!("invalid config {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for (name, f) in [("val_fraction", self.val_fraction), ("test_fraction", self.test_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return Err(CliError::Validation(format!("{name} = {f} outside [0, 1)")));
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return Err(CliError::Validation(
                "val_fraction + test_fraction leaves no training data".into(),
            ));
        }
        if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(CliError::Validation(format!("ratios {:?} outside [0, 1]", self.ratios)));
        }
        if self.ablation_seeds.is_empty() {
            return Err(CliError::Validation("ablation_seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Canonical serialization used for hashing and the config echo.
    pub fn canonical_json(&self) -> Result<String, CliError> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("config serialization failed: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    /// First 12 hex digits of the SHA-256 of the canonical config.
    pub fn digest(&self) -> Result<String, CliError> {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json()?.as_bytes());
        let hex = format!("{:x}", hasher.finalize());
        Ok(hex[..12].to_string())
    }
}
