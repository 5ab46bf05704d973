//! Run configuration: one human-editable TOML file merging the model,
//! training, generator, and evaluation settings, plus paths and seeds.
//! Every run validates the whole config up front and writes the resolved
//! version next to its outputs so results are reproducible from that file
//! and the seeds alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Protocol;
use crate::model::ModelConfig;
use crate::scenegen::GenConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config field {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("{0}")]
    Other(String),
}

/// Dataset generation settings beyond `GenConfig` proper.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub n_pairs: usize,
    pub all_fraction: f64,
    /// Train share of the train/test split.
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { n_pairs: 100, all_fraction: 0.12, split_ratio: 0.9, seed: 0 }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub protocol: Protocol,
    pub split: String,
    /// Dump red/blue overlay PNGs when set.
    pub overlay_dir: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { protocol: Protocol::Native, split: "test".into(), overlay_dir: None }
    }
}

/// The merged run configuration. Unset sections take their defaults, so a
/// minimal config file can be empty.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub dataset: DatasetSection,
    pub eval: EvalSection,
    /// Model init seed (data order comes from `train.seed`).
    pub model_seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid {
            field: "model".into(),
            reason: e.to_string(),
        })?;
        self.train.validate().map_err(|e| ConfigError::Invalid {
            field: "train".into(),
            reason: e.to_string(),
        })?;
        if self.dataset.n_pairs == 0 {
            return Err(ConfigError::Invalid {
                field: "dataset.n_pairs".into(),
                reason: "must be at least 1".into(),
            });
        }
        for (field, v) in [
            ("dataset.all_fraction", self.dataset.all_fraction),
            ("dataset.split_ratio", self.dataset.split_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid {
                    field: field.into(),
                    reason: format!("{v} outside [0, 1]"),
                });
            }
        }
        if !(self.gen.min_radius_frac > 0.0 && self.gen.min_radius_frac < self.gen.max_radius_frac) {
            return Err(ConfigError::Invalid {
                field: "gen.min_radius_frac".into(),
                reason: format!(
                    "radius fractions must satisfy 0 < min ({}) < max ({})",
                    self.gen.min_radius_frac, self.gen.max_radius_frac
                ),
            });
        }
        if self.gen.canvas != self.model.image_side {
            return Err(ConfigError::Invalid {
                field: "gen.canvas".into(),
                reason: format!(
                    "canvas {} must match model.image_side {}",
                    self.gen.canvas, self.model.image_side
                ),
            });
        }
        Ok(())
    }

    /// Write the fully resolved config next to a run's outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<PathBuf, ConfigError> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| ConfigError::Other(e.to_string()))?;
        let path = out_dir.join("resolved_config.toml");
        let text = toml::to_string_pretty(self).map_err(|e| ConfigError::Other(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| ConfigError::Other(e.to_string()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.dataset.n_pairs, 100);
        assert_eq!(cfg.model.d_model, 128);
        assert_eq!(cfg.eval.protocol, Protocol::Native);
    }

    #[test]
    fn partial_override() {
        let cfg: RunConfig = toml::from_str(
            "[model]\nd_model = 64\n[dataset]\nn_pairs = 7\n[eval]\nprotocol = { kind = \"fixed\", value = \"any change\" }\n",
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.dataset.n_pairs, 7);
        assert_eq!(cfg.eval.protocol, Protocol::Fixed("any change".into()));
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = RunConfig::default();
        cfg.dataset.all_fraction = 1.5;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("dataset.all_fraction"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.gen.canvas = 32;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("gen.canvas"), "{err}");
    }

    #[test]
    fn resolved_config_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let path = cfg.write_resolved(dir.path()).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.model.d_model, cfg.model.d_model);
        assert_eq!(loaded.dataset.seed, cfg.dataset.seed);
    }
}
