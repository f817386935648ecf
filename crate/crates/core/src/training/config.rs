use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::mask::{default_bins, MaskBin};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::NetworkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// How batch items are drawn from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Uniformly with replacement.
    #[default]
    Random,
    /// Items `step * batch_size + b` modulo the dataset length.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dataset: Option<PathBuf>,
    /// Directory of mask PNGs; brush-stroke masks from `mask_bins` when absent.
    pub masks: Option<PathBuf>,
    pub mask_bins: Vec<MaskBin>,
    pub flip: bool,
    pub sampling: Sampling,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            masks: None,
            mask_bins: default_bins(),
            flip: true,
            sampling: Sampling::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// Tensor container with VGG16 `features.*` weights; the built-in random
    /// extractor is used when absent.
    pub vgg16: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
    pub optimizer: AdamConfig,
    pub losses: LossWeights,
    pub network: NetworkConfig,
    pub data: DataConfig,
    pub extractor: ExtractorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 4,
            max_steps: 1000,
            checkpoint_every: 100,
            output_dir: PathBuf::from("runs/default"),
            optimizer: AdamConfig::default(),
            losses: LossWeights::default(),
            network: NetworkConfig::default(),
            data: DataConfig::default(),
            extractor: ExtractorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.losses.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {}", o.learning_rate)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config(format!(
                "adam betas ({}, {}) eps {}",
                o.beta1, o.beta2, o.eps
            )));
        }
        if let Some(c) = o.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip_norm {c}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.data.masks.is_none() && self.data.mask_bins.is_empty() {
            return Err(Error::Config("no mask directory and no mask bins".into()));
        }
        for b in &self.data.mask_bins {
            MaskBin::new(b.lower, b.upper)?;
        }
        Ok(())
    }
}
