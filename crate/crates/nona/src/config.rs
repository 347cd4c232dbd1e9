//! Experiment configuration: a single JSON file that pins everything a
//! run depends on, so the config echo written next to each result is
//! sufficient to reproduce it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::similarity::SimilarityKind;
use crate::softstep::SoftStepConfig;
use crate::train::{HeadKind, ModelConfig, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: SyntheticSpec,
    #[serde(default)]
    pub model: ModelConfig,
    pub head: HeadKind,
    pub similarity: SimilarityKind,
    #[serde(default = "SoftStepConfig::none")]
    pub softstep: SoftStepConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.n_points < 10 {
            return Err(Error::Config("dataset.n_points must be >= 10".into()));
        }
        if self.dataset.noise_std < 0.0 {
            return Err(Error::Config("dataset.noise_std must be >= 0".into()));
        }
        if self.model.input_dim == 0
            || self.model.hidden_dim == 0
            || self.model.embedding_dim == 0
        {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        self.softstep.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "dataset": {"target": "radial", "n_points": 100, "noise_std": 0.05, "seed": 0},
            "head": "nona",
            "similarity": "neg_l2",
            "output_dir": "runs/demo"
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(&minimal_json()).unwrap();
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.model.embedding_dim, 25);
        assert_eq!(cfg.train.max_epochs, 300);
    }

    #[test]
    fn missing_dataset_target_names_the_key() {
        let bad = r#"{
            "dataset": {"n_points": 100, "noise_std": 0.05, "seed": 0},
            "head": "nona",
            "similarity": "neg_l2",
            "output_dir": "runs/demo"
        }"#;
        let err = ExperimentConfig::from_json(bad).unwrap_err();
        assert!(err.to_string().contains("target"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = minimal_json().replacen("\"head\"", "\"extra\": 1, \"head\"", 1);
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn roundtrip_through_json() {
        let cfg = ExperimentConfig::from_json(&minimal_json()).unwrap();
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg.to_json(), again.to_json());
    }

    #[test]
    fn invalid_values_rejected() {
        let cfg = minimal_json().replace("\"n_points\": 100", "\"n_points\": 5");
        assert!(ExperimentConfig::from_json(&cfg).is_err());
    }
}
