//! Experiment configuration: defaults, then a TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pit_core::mixer::{derive_seed, CorpusSpec, FrameConfig};
use pit_core::network::ModelConfig;
use pit_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; corpus, init and shuffle seeds are derived from it.
    pub seed: u64,
    pub workers: usize,
    /// Share of the training split held out for the learning-rate schedule.
    pub heldout_fraction: f64,
    pub corpus: CorpusSpec,
    pub frame: FrameConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            workers: 1,
            heldout_fraction: 0.1,
            corpus: CorpusSpec::default(),
            frame: FrameConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fills the named sub-seeds from the master seed.
    pub fn derive_seeds(&mut self) {
        self.corpus.seed = derive_seed(self.seed, "corpus", 0);
        self.model.seed = derive_seed(self.seed, "init", 0);
        self.train.shuffle_seed = derive_seed(self.seed, "shuffle", 0);
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED);
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
