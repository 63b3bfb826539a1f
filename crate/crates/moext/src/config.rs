//! Run configuration: TOML file + CLI overrides, hashed for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

fn default_seed() -> u64 {
    42
}
fn default_protocol() -> String {
    "SDE_NATIVE".to_string()
}
fn default_model_preset() -> String {
    "full".to_string()
}
fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Evaluation protocol name, e.g. "SDE_CASME2_5" or "CDE_3".
    pub protocol: String,
    /// Model size preset: "full", "reduced", or "tiny".
    pub model_preset: String,
    pub jobs: usize,
    pub deterministic: bool,
    pub exclude_test_subjects_from_pretrain: bool,
    /// Manifest CSVs; each row carries its dataset id.
    pub manifests: Vec<PathBuf>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            protocol: default_protocol(),
            model_preset: default_model_preset(),
            jobs: default_jobs(),
            deterministic: false,
            exclude_test_subjects_from_pretrain: false,
            manifests: Vec::new(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Instantiate the model preset named in the config.
    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        match self.model_preset.as_str() {
            "full" => Ok(ModelConfig::full(num_classes)),
            "reduced" => Ok(ModelConfig::reduced(num_classes)),
            "tiny" => Ok(ModelConfig::tiny(num_classes)),
            other => Err(Error::Config(format!(
                "unknown model preset '{other}' (expected full, reduced, or tiny)"
            ))),
        }
    }

    /// SHA-256 over the canonical JSON form of this configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Write `config_hash.txt` (and the resolved config itself) next to the
    /// run outputs.
    pub fn write_provenance(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("config_hash.txt"), format!("{}\n", self.hash()))?;
        let toml_text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        std::fs::write(out_dir.join("config_resolved.toml"), toml_text)?;
        Ok(())
    }
}
