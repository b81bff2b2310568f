use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Where codebook rows start before training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookInit {
    /// Uniform on the unit sphere.
    Sphere,
    /// Encoder features of randomly chosen positions from the first batch.
    Data,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    /// Spatial downsample ratio `p`; one of 2, 4, 8, 16.
    pub downsample: usize,
    pub image_channels: usize,
    /// Channel width at each resolution, finest first; `log2(p) + 1` entries.
    pub channels: Vec<usize>,
    /// Number of codes `K`.
    pub codebook_size: usize,
    /// Code vector dimension `C`.
    pub code_dim: usize,
    /// Commitment loss weight.
    pub beta: f64,
    /// Adversarial loss weight.
    pub lambda_g: f64,
    /// Weight of the perceptual term. Zero disables it.
    pub perceptual_weight: f64,
    /// First iteration at which the adversarial branch is active.
    pub adv_start_iter: usize,
    /// Capacity of the recent-index queue behind the usage metric.
    pub usage_queue: usize,
    /// Width of the first discriminator layer.
    pub disc_channels: usize,
    /// Groups in the normalization ahead of the code projection; must
    /// divide the last channel width.
    pub norm_groups: usize,
    pub codebook_init: CodebookInit,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::desk(4)
    }
}

impl TokenizerConfig {
    /// Small grayscale tokenizer: K = 64, C = 4, widths doubling from 8.
    pub fn desk(downsample: usize) -> Self {
        let stages = downsample.max(1).trailing_zeros() as usize;
        Self {
            downsample,
            image_channels: 1,
            channels: (0..=stages).map(|i| 8 << i).collect(),
            codebook_size: 64,
            code_dim: 4,
            beta: 0.25,
            lambda_g: 0.5,
            perceptual_weight: 0.0,
            adv_start_iter: 20_000,
            usage_queue: 4096,
            disc_channels: 16,
            norm_groups: 8,
            codebook_init: CodebookInit::Data,
        }
    }

    /// The reference ImageNet setting: p = 16, K = 16384, C = 8, RGB.
    pub fn reference() -> Self {
        Self {
            downsample: 16,
            image_channels: 3,
            channels: vec![128, 128, 256, 256, 512],
            codebook_size: 16384,
            code_dim: 8,
            beta: 0.25,
            lambda_g: 0.5,
            perceptual_weight: 0.0,
            adv_start_iter: 20_000,
            usage_queue: 65536,
            disc_channels: 64,
            norm_groups: 32,
            codebook_init: CodebookInit::Data,
        }
    }

    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            matches!(self.downsample, 2 | 4 | 8 | 16),
            Config,
            "downsample ratio must be 2, 4, 8 or 16, got {}",
            self.downsample
        );
        ensure!(
            self.channels.len() == self.stages() + 1,
            Config,
            "need {} channel widths for downsample {}, got {}",
            self.stages() + 1,
            self.downsample,
            self.channels.len()
        );
        ensure!(self.channels.iter().all(|&c| c > 0), Config, "channel widths must be positive");
        ensure!(matches!(self.image_channels, 1 | 3), Config, "image channels must be 1 or 3");
        ensure!(self.codebook_size > 0, Config, "empty codebook");
        ensure!(self.code_dim > 0, Config, "code dimension must be positive");
        ensure!(self.beta > 0.0, Config, "commitment weight must be > 0, got {}", self.beta);
        ensure!(self.lambda_g >= 0.0, Config, "adversarial weight must be >= 0");
        ensure!(self.perceptual_weight >= 0.0, Config, "perceptual weight must be >= 0");
        ensure!(self.usage_queue > 0, Config, "usage queue capacity must be positive");
        ensure!(self.disc_channels > 0, Config, "discriminator width must be positive");
        let last = self.channels[self.stages()];
        ensure!(
            self.norm_groups > 0 && last % self.norm_groups == 0,
            Config,
            "norm groups {} must divide the last channel width {}",
            self.norm_groups,
            last
        );
        Ok(())
    }

    /// Token grid extents `(H/p, W/p)` for an image.
    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.downsample;
        ensure!(
            height % p == 0 && width % p == 0 && height > 0 && width > 0,
            Dimension,
            "image {}x{} not divisible by downsample ratio {}",
            height,
            width,
            p
        );
        Ok((height / p, width / p))
    }
}
