//! Run configuration file (JSON). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub anchors: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Train / validation / test fractions of conversations.
    pub split: [f64; 3],
    pub split_seed: u64,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            anchors: None,
            out_dir: None,
            split: [0.8, 0.1, 0.1],
            split_seed: 0,
            seeds: vec![1],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.split.iter().any(|&r| !(r > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be positive and sum to 1, got {:?}",
                self.split
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::AblationMode;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"model": {"encoder": {"d": 64}}, "train": {"ablation": "single-branch", "sampling": {"q": 0.5}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.model.encoder.d, 64);
        assert_eq!(cfg.model.encoder.heads, 8);
        assert_eq!(cfg.train.ablation, AblationMode::SingleBranch);
        assert_eq!(cfg.train.sampling.q, 0.5);
        assert_eq!(cfg.train.weights.dist, 0.9);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": 1.0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"ablation": "nope"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"sampling": {"q": 2.0}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"split": [0.5, 0.5, 0.5]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"encoder": {"d": 10}}}"#).is_err());
    }
}
