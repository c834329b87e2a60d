//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::field::FieldDims;
use crate::trainer::TrainConfig;

use super::scene::SceneSpec;
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scene: SceneSpec,
    #[serde(default)]
    pub field: FieldDims,
    #[serde(default)]
    pub train: TrainConfig,
    /// Codec points for sweeps and comparisons.
    #[serde(default)]
    pub sweep: Vec<CodecConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/toy"),
            scene: SceneSpec::toy(),
            field: FieldDims::default(),
            train: TrainConfig::default(),
            sweep: vec![CodecConfig::jpeg(20), CodecConfig::jpeg(35), CodecConfig::jpeg(65)],
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let config = |e: &dyn std::fmt::Display| HarnessError::Config(e.to_string());
        self.scene.validate()?;
        self.field.validate().map_err(|e| config(&e))?;
        self.train_config().validate().map_err(|e| config(&e))?;
        for c in &self.sweep {
            c.validate().map_err(|e| config(&e))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }

    /// Training parameters with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Codec points for comparisons; the training codec when no sweep is given.
    pub fn codec_points(&self) -> Vec<CodecConfig> {
        if self.sweep.is_empty() {
            vec![self.train.pipeline.codec.clone()]
        } else {
            self.sweep.clone()
        }
    }
}

/// Canonical text of a config file.
pub fn canonicalize(text: &str) -> Result<String, HarnessError> {
    Ok(ExperimentConfig::parse(text)?.to_toml())
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
