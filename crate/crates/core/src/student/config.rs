use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub class_token: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { image_size: 32, patch_size: 8, depth: 4, dim: 64, heads: 4, mlp_ratio: 2, class_token: true }
    }
}

impl BackboneConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("backbone: {m}")));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("patch size must divide image size");
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return bad("heads must divide dim");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Number of interaction blocks.
    pub blocks: usize,
    /// Output strides of the spatial prior module, ascending.
    pub scales: Vec<usize>,
    pub gate_init: f64,
    pub spm_channels: usize,
    /// Stride of the adapter map fused into the canonical grid.
    pub fusion_stride: usize,
    pub ffn_ratio: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { blocks: 4, scales: vec![8, 16, 32], gate_init: 0.0, spm_channels: 32, fusion_stride: 16, ffn_ratio: 2 }
    }
}

impl AdapterConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("adapter: {m}")));
        if self.blocks == 0 {
            return bad("at least one interaction block is required");
        }
        if self.scales.is_empty() || self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return bad("scales must be non-empty and strictly ascending");
        }
        if self.scales.iter().any(|&s| s < 4 || !s.is_power_of_two() || s > image_size) {
            return bad("scales must be powers of two between 4 and the image size");
        }
        if !self.scales.contains(&self.fusion_stride) {
            return bad("fusion_stride must be one of the scales");
        }
        if !self.gate_init.is_finite() {
            return bad("gate_init must be finite");
        }
        if self.spm_channels == 0 || self.ffn_ratio == 0 {
            return bad("spm_channels and ffn_ratio must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    /// Hidden width of the projection heads; `max(in, out)` when absent.
    pub head_hidden: Option<usize>,
}


impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adapter.validate(self.backbone.image_size)
    }
}

/// Which parameter groups a run may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPolicy {
    pub preservation_on: bool,
}
