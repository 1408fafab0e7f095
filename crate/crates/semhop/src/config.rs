//! TOML experiment configuration covering every module's keys.

use crate::channel::ChannelKind;
use crate::codec::ModelConfig;
use crate::error::{Error, Result};
use crate::harness::baseline::SeparateCodingConfig;
use crate::harness::EvalConfig;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Opt-in auto-download. Off by default; a local copy (or a generated
    /// synthetic corpus) is expected.
    pub download: bool,
    /// Optional seeded train-split reduction.
    pub subset_size: Option<usize>,
    pub subset_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { root: PathBuf::from("data/cifar10"), download: false, subset_size: None, subset_seed: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelSection {
    pub kind: ChannelKind,
    pub snr_db: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection { kind: ChannelKind::Awgn, snr_db: 18.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OutConfig {
    pub dir: PathBuf,
}

impl Default for OutConfig {
    fn default() -> Self {
        OutConfig { dir: PathBuf::from("runs/default") }
    }
}

/// Full experiment configuration. Every section has defaults, so a config
/// file only needs the keys it overrides.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub channel: ChannelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub baseline: SeparateCodingConfig,
    pub out: OutConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: Config =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.baseline.validate()?;
        if self.channel.snr_db.is_nan() {
            return Err(Error::Config("channel.snr_db must not be NaN".into()));
        }
        Ok(())
    }
}
