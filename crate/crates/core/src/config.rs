//! Run configuration: one flat, human-editable TOML file with sections per
//! subsystem. Every run writes its fully resolved config next to its outputs,
//! and `parse(emit(config)) == config`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::occlude::{OccluderKind, ALL_OCCLUDERS};
use crate::data::{hex_sha256, DataError};
use crate::loss::LossWeights;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config key `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            num_classes: 4,
            per_class: 500,
            image_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionSection {
    /// Occluder type names drawn during training.
    pub types: Vec<String>,
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub clean_fraction: f64,
    /// When set, this type is excluded from training and evaluated separately.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_type: Option<String>,
}

impl Default for OcclusionSection {
    fn default() -> Self {
        OcclusionSection {
            types: ALL_OCCLUDERS.iter().map(|k| k.name().to_string()).collect(),
            coverage_min: 0.10,
            coverage_max: 0.90,
            clean_fraction: 0.25,
            heldout_type: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            epochs: 12,
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_intra: f64,
    pub lambda_inter: f64,
    pub lambda_cls: f64,
    pub margin: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            lambda_intra: w.lambda_intra,
            lambda_inter: w.lambda_inter,
            lambda_cls: w.lambda_cls,
            margin: w.margin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 40,
            patience: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random draw in the pipeline derives from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub occlusion: OcclusionSection,
    pub backbone: BackboneSection,
    pub loss: LossSection,
    pub trainer: TrainerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            occlusion: OcclusionSection::default(),
            backbone: BackboneSection::default(),
            loss: LossSection::default(),
            trainer: TrainerSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        RunConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &'static str, message: String| Err(ConfigError::Invalid { key, message });
        if self.trainer.learning_rate <= 0.0 {
            return invalid("trainer.learning_rate", "must be positive".into());
        }
        if self.trainer.max_epochs < 1 {
            return invalid("trainer.max_epochs", "must be at least 1".into());
        }
        if self.trainer.patience < 1 {
            return invalid("trainer.patience", "must be at least 1".into());
        }
        if self.trainer.batch_size < 2 {
            return invalid("trainer.batch_size", "must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion.clean_fraction) {
            return invalid("occlusion.clean_fraction", "must lie in [0,1]".into());
        }
        if !(0.0..=0.9).contains(&self.occlusion.coverage_min)
            || !(0.0..=0.9).contains(&self.occlusion.coverage_max)
            || self.occlusion.coverage_min > self.occlusion.coverage_max
        {
            return invalid("occlusion.coverage_min", "coverage range must lie in [0, 0.9]".into());
        }
        for t in &self.occlusion.types {
            OccluderKind::parse(t)?;
        }
        if let Some(h) = &self.occlusion.heldout_type {
            OccluderKind::parse(h)?;
        }
        if self.occlusion.types.is_empty() {
            return invalid("occlusion.types", "need at least one occluder type".into());
        }
        Ok(())
    }

    pub fn occluder_types(&self) -> Vec<OccluderKind> {
        self.occlusion
            .types
            .iter()
            .map(|t| OccluderKind::parse(t).expect("validated"))
            .collect()
    }

    pub fn heldout_type(&self) -> Option<OccluderKind> {
        self.occlusion
            .heldout_type
            .as_ref()
            .map(|t| OccluderKind::parse(t).expect("validated"))
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_intra: self.loss.lambda_intra,
            lambda_inter: self.loss.lambda_inter,
            lambda_cls: self.loss.lambda_cls,
            margin: self.loss.margin,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.trainer.learning_rate,
            batch_size: self.trainer.batch_size,
            max_epochs: self.trainer.max_epochs,
            patience: self.trainer.patience,
            seed: self.seed,
            weights: self.loss_weights(),
        }
    }

    /// Digest of the resolved config; provenance stamps.
    pub fn content_hash(&self) -> String {
        hex_sha256(self.to_toml().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_exactly() {
        let config = RunConfig::default();
        let emitted = config.to_toml();
        let parsed = RunConfig::from_toml(&emitted).unwrap();
        assert_eq!(parsed, config);
        // and emission is stable
        assert_eq!(parsed.to_toml(), emitted);
    }

    #[test]
    fn heldout_type_round_trips() {
        let config = RunConfig {
            occlusion: OcclusionSection {
                heldout_type: Some("object".into()),
                ..Default::default()
            },
            ..Default::default()
        };
        let parsed = RunConfig::from_toml(&config.to_toml()).unwrap();
        assert_eq!(parsed, config);
        assert_eq!(parsed.heldout_type(), Some(OccluderKind::Object));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let parsed = RunConfig::from_toml("seed = 42\n[dataset]\nnum_classes = 3\n").unwrap();
        assert_eq!(parsed.seed, 42);
        assert_eq!(parsed.dataset.num_classes, 3);
        assert_eq!(parsed.dataset.per_class, 500);
        assert_eq!(parsed.trainer.max_epochs, 40);
    }

    #[test]
    fn named_key_diagnostics() {
        let bad = RunConfig {
            trainer: TrainerSection {
                learning_rate: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("trainer.learning_rate"), "{msg}");

        let err = RunConfig::from_toml("unknown_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("unknown_key"), "{err}");
    }

    #[test]
    fn bad_occluder_type_is_rejected() {
        let mut config = RunConfig::default();
        config.occlusion.types = vec!["white".into(), "blob".into()];
        assert!(config.validate().is_err());
    }

    #[test]
    fn content_hash_tracks_changes() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.content_hash(), b.content_hash());
        b.seed = 8;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
