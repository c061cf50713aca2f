//! Declarative run configuration: one JSON document covering the model,
//! training, adversary, loss and evaluation settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use warpadv_core::data::DegradeSpec;
use warpadv_core::model::ModelConfig;
use warpadv_core::train::TrainConfig;

pub const SEED_ENV: &str = "DARFACE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides `train.seed` when set.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Evaluation degradation levels.
    pub degrade: Vec<DegradeSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            degrade: vec![
                DegradeSpec::none(),
                DegradeSpec::resolution(16),
                DegradeSpec::resolution(8),
            ],
        }
    }
}

/// Seed when neither a flag nor the config file sets one.
pub fn default_seed() -> Result<u64, String> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}

impl RunConfig {
    /// Defaults, overlaid by the file when given. A file without any seed
    /// falls back to the environment default.
    pub fn resolve(path: Option<&Path>) -> Result<Self, ConfigError> {
        let (mut cfg, has_seed) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| ConfigError::Missing(format!("{}: {e}", p.display())))?;
                let invalid = |e: serde_json::Error| ConfigError::Invalid(format!("{}: {e}", p.display()));
                let doc: serde_json::Value = serde_json::from_str(&text).map_err(invalid)?;
                let has_seed = doc.get("seed").is_some_and(|v| !v.is_null()) || doc.pointer("/train/seed").is_some();
                (serde_json::from_value(doc).map_err(invalid)?, has_seed)
            }
            None => (Self::default(), false),
        };
        if !has_seed {
            cfg.seed = Some(default_seed().map_err(ConfigError::Invalid)?);
        }
        Ok(cfg)
    }

    /// Push the top-level seed into the training config and validate.
    pub fn finish(mut self) -> Result<Self, ConfigError> {
        if let Some(s) = self.seed {
            self.train.seed = s;
        }
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let (h, w) = (self.model.input_size, self.model.input_size);
        for d in &self.degrade {
            d.validate(h, w).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(self)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {0}")]
    Missing(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}
