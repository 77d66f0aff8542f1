use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeEmbeddingKind {
    /// Fixed sinusoidal basis followed by a learned projection.
    #[default]
    Sinusoidal,
    /// Learned lookup table with one row per diffusion step.
    Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side length.
    pub image_size: usize,
    pub in_channels_image: usize,
    pub in_channels_mask: usize,
    pub base_channels: usize,
    /// Residual blocks per encoder stage.
    pub stage_block_counts: Vec<usize>,
    /// Stage width as a multiple of `base_channels`.
    pub channel_multipliers: Vec<usize>,
    pub time_embed_dim: usize,
    #[serde(default)]
    pub time_embedding: TimeEmbeddingKind,
    /// 0-indexed encoder stages whose image features are gated by mask features.
    pub fusion_stages: Vec<usize>,
    pub use_dycond: bool,
    pub use_ffparser: bool,
    pub bottleneck_blocks: usize,
    /// Upper bound on group-norm groups; each layer uses the largest divisor of its width not above it.
    pub norm_groups: usize,
    /// Training diffusion steps `T`.
    pub diffusion_steps: usize,
}

impl Default for ModelConfig {
    /// Three stages with (3, 4, 6) blocks and fusion at the two later stages.
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels_image: 1,
            in_channels_mask: 1,
            base_channels: 32,
            stage_block_counts: vec![3, 4, 6],
            channel_multipliers: vec![1, 2, 4],
            time_embed_dim: 64,
            time_embedding: TimeEmbeddingKind::Sinusoidal,
            fusion_stages: vec![1, 2],
            use_dycond: true,
            use_ffparser: true,
            bottleneck_blocks: 1,
            norm_groups: 8,
            diffusion_steps: 1000,
        }
    }
}

impl ModelConfig {
    /// Three stages, one block each.
    pub fn s_toy() -> Self {
        Self {
            base_channels: 8,
            stage_block_counts: vec![1, 1, 1],
            time_embed_dim: 32,
            norm_groups: 4,
            ..Self::default()
        }
    }

    /// Four stages, one block each.
    pub fn b_toy() -> Self {
        Self {
            base_channels: 8,
            stage_block_counts: vec![1, 1, 1, 1],
            channel_multipliers: vec![1, 2, 4, 4],
            time_embed_dim: 32,
            norm_groups: 4,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "s-toy" | "S-toy" => Some(Self::s_toy()),
            "b-toy" | "B-toy" => Some(Self::b_toy()),
            "default" | "full" => Some(Self::default()),
            _ => None,
        }
    }

    pub fn with_ablation(mut self, use_dycond: bool, use_ffparser: bool) -> Self {
        self.use_dycond = use_dycond;
        self.use_ffparser = use_ffparser;
        self
    }

    pub fn stages(&self) -> usize {
        self.stage_block_counts.len()
    }

    pub fn stage_channels(&self, k: usize) -> usize {
        self.base_channels * self.channel_multipliers[k]
    }

    pub fn stage_size(&self, k: usize) -> usize {
        self.image_size >> k
    }

    pub fn bottleneck_channels(&self) -> usize {
        2 * self.stage_channels(self.stages() - 1)
    }

    /// `(channels, height, width)` of every encoder stage output.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        (0..self.stages())
            .map(|k| (self.stage_channels(k), self.stage_size(k), self.stage_size(k)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        ensure!(s >= 3, "need at least 3 encoder stages, got {s}");
        ensure!(
            self.channel_multipliers.len() == s,
            "stage_block_counts has {s} entries but channel_multipliers has {}",
            self.channel_multipliers.len()
        );
        ensure!(
            self.stage_block_counts.iter().all(|&b| b >= 1),
            "every stage needs at least one residual block"
        );
        ensure!(
            self.channel_multipliers.iter().all(|&m| m >= 1),
            "channel multipliers must be positive"
        );
        ensure!(
            self.image_size > 0 && self.image_size.is_multiple_of(1 << s),
            "image_size {} must be divisible by 2^{s}",
            self.image_size
        );
        ensure!(
            self.in_channels_image > 0 && self.in_channels_mask > 0 && self.base_channels > 0,
            "channel counts must be positive"
        );
        ensure!(
            self.time_embed_dim >= 2 && self.time_embed_dim.is_multiple_of(2),
            "time_embed_dim must be even and at least 2"
        );
        ensure!(self.norm_groups >= 1, "norm_groups must be positive");
        ensure!(self.diffusion_steps >= 2, "diffusion_steps must be at least 2");
        for &k in &self.fusion_stages {
            ensure!(k < s, "fusion stage {k} out of range for {s} stages");
        }
        Ok(())
    }

    pub(crate) fn groups_for(&self, channels: usize) -> usize {
        (1..=self.norm_groups.min(channels))
            .rev()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1)
    }

    pub(crate) fn is_fusion_stage(&self, k: usize) -> bool {
        self.fusion_stages.contains(&k)
    }
}
