//! Run configuration: model, training and generation settings plus paths,
//! loaded from JSON and overridden from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gen::GenConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kg_dir: Option<PathBuf>,
    pub queries_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.display().to_string(), source })
    }

    /// Loads `path` if given, else defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.gen.validate().map_err(|e| invalid(&e))?;
        Ok(())
    }

    /// Writes the resolved configuration to `dir/config.json`.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf, ConfigError> {
        let dir = dir.as_ref();
        let path = dir.join("config.json");
        let io = |source| ConfigError::Io { path: path.display().to_string(), source };
        fs::create_dir_all(dir).map_err(io)?;
        let text = serde_json::to_string_pretty(self).expect("config serializes") + "\n";
        fs::write(&path, text).map_err(io)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { kg_dir: Some("kg".into()), ..RunConfig::default() };
        let path = cfg.write_resolved(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);

        let partial = dir.path().join("p.json");
        fs::write(&partial, r#"{"model": {"dim": 16}, "train": {"k_neg": 4}}"#).unwrap();
        let p = RunConfig::load(&partial).unwrap();
        assert_eq!(p.model.dim, 16);
        assert_eq!(p.model.num_bases, ModelConfig::default().num_bases);
        assert_eq!(p.train.k_neg, 4);

        fs::write(&partial, r#"{"modle": {}}"#).unwrap();
        assert!(matches!(RunConfig::load(&partial), Err(ConfigError::Parse { .. })));
        let bad = RunConfig { train: TrainConfig { k_neg: 0, ..TrainConfig::default() }, ..RunConfig::default() };
        assert!(bad.validate().is_err());
    }
}
