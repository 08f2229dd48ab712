use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gtool_core::corpus::DatasetFormat;
use gtool_core::embed::EmbedderConfig;
use gtool_core::gnn::EncoderConfig;
use gtool_core::lmbridge::MockLmConfig;
use gtool_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    pub format: DatasetFormat,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            path: None,
            format: DatasetFormat::Native,
        }
    }
}

/// Everything a run needs. Loaded from TOML; command-line flags override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub embedder: EmbedderConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub lm: MockLmConfig,
    pub out_dir: PathBuf,
    /// When set, seeds both the encoder init and the training streams.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            embedder: EmbedderConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            lm: MockLmConfig::default(),
            out_dir: PathBuf::from("gtool-out"),
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| gtool_core::Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Applies cross-section defaults and checks every nested config.
    pub fn finish(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.encoder.seed = seed;
        }
        self.encoder.attr_dim = self.embedder.dim;
        self.embedder.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if self.lm.dim != self.encoder.lm_dim {
            return Err(gtool_core::Error::Config(format!(
                "lm.dim = {} must equal encoder.lm_dim = {}",
                self.lm.dim, self.encoder.lm_dim
            ))
            .into());
        }
        Ok(self)
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset
            .path
            .as_deref()
            .ok_or_else(|| anyhow::anyhow!(crate::MissingFlag("--dataset")))
    }

    pub fn ensure_out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(&self.out_dir)
    }
}
