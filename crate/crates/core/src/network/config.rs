use serde::{Deserialize, Serialize};

use crate::blocks::NormKind;
use crate::error::{Error, Result};

/// Component toggles for the ablation experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the structure stream together with its gated units and fusion blocks.
    pub ms_only: bool,
    /// Feed raw main-stream encoder features into the structure stream.
    pub no_gu: bool,
    /// Replace adaptive fusion with concatenation followed by a 1x1 conv.
    pub no_afblk: bool,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Self> {
        let mut out = Ablation::default();
        for part in name.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part {
                "ms_only" => out.ms_only = true,
                "no_gu" => out.no_gu = true,
                "no_afblk" => out.no_afblk = true,
                "none" | "full" => {}
                other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
            }
        }
        Ok(out)
    }

    pub fn has_structure_stream(&self) -> bool {
        !self.ms_only
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Encoder/decoder depth `L` of each stream.
    pub num_levels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// (height, width) of training and inference images.
    pub input_size: [usize; 2],
    pub bottleneck_blocks: usize,
    pub attention_reduction: usize,
    pub norm: NormKind,
    /// Widths of the discriminator's first five layers; a 1-channel head follows.
    pub disc_channels: Vec<usize>,
    pub ablation: Ablation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_levels: 4,
            base_channels: 64,
            max_channels: 512,
            input_size: [64, 64],
            bottleneck_blocks: 4,
            attention_reduction: crate::blocks::REDUCTION,
            norm: NormKind::Instance,
            disc_channels: vec![64, 128, 256, 256, 256],
            ablation: Ablation::default(),
        }
    }
}

impl NetworkConfig {
    pub const DISC_LAYERS: usize = 6;

    pub fn validate(&self) -> Result<()> {
        let l = self.num_levels;
        if l < 2 {
            return Err(Error::Config(format!("num_levels must be at least 2, got {l}")));
        }
        if l > 16 {
            return Err(Error::Config(format!("num_levels {l} is unreasonably deep")));
        }
        let [h, w] = self.input_size;
        let step = 1usize << l;
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} is not divisible by 2^{l} = {step}"
            )));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::Config(format!(
                "channel schedule base {} / max {}",
                self.base_channels, self.max_channels
            )));
        }
        let r = self.attention_reduction;
        if r == 0 {
            return Err(Error::Config("attention_reduction must be positive".into()));
        }
        if self.ablation.has_structure_stream() && !self.ablation.no_afblk {
            for lvl in 1..=l {
                let c = self.decoder_channels(lvl);
                if c % r != 0 {
                    return Err(Error::Config(format!(
                        "decoder level {lvl} has {c} channels, not divisible by attention reduction {r}"
                    )));
                }
            }
        }
        if self.disc_channels.len() != Self::DISC_LAYERS - 1 || self.disc_channels.contains(&0) {
            return Err(Error::Config(format!(
                "disc_channels needs {} positive widths, got {:?}",
                Self::DISC_LAYERS - 1,
                self.disc_channels
            )));
        }
        Ok(())
    }

    /// Encoder width at level `l` (1-based): base doubled per level, capped.
    pub fn channels(&self, level: usize) -> usize {
        let c = self.base_channels.saturating_mul(1usize << (level - 1).min(30));
        c.min(self.max_channels)
    }

    /// Channel schedule of the encoders, level 1 first.
    pub fn channel_schedule(&self) -> Vec<usize> {
        (1..=self.num_levels).map(|l| self.channels(l)).collect()
    }

    /// Width of decoder level `l`, which works at the resolution of encoder
    /// level `l - 1` (full resolution for level 1).
    pub fn decoder_channels(&self, level: usize) -> usize {
        self.channels(level.saturating_sub(1).max(1))
    }

    /// Spatial size of encoder features `X^l`.
    pub fn encoder_size(&self, level: usize) -> [usize; 2] {
        let [h, w] = self.input_size;
        [h >> level, w >> level]
    }

    /// Spatial size of decoder features `X'^l` and pyramid level `l`.
    pub fn decoder_size(&self, level: usize) -> [usize; 2] {
        let [h, w] = self.input_size;
        [h >> (level - 1), w >> (level - 1)]
    }

    /// A small configuration for quick experiments and tests.
    pub fn tiny(size: usize, levels: usize, base: usize) -> Self {
        Self {
            num_levels: levels,
            base_channels: base,
            max_channels: base << (levels - 1),
            input_size: [size, size],
            disc_channels: vec![base, base * 2, base * 2, base * 2, base * 2],
            ..Self::default()
        }
    }
}
