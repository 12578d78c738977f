use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pyramid level fed to the decoder; `Pl` has stride `2^l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureLevel {
    P2,
    P3,
    P4,
    P5,
}

impl FeatureLevel {
    pub fn index(self) -> usize {
        match self {
            FeatureLevel::P2 => 2,
            FeatureLevel::P3 => 3,
            FeatureLevel::P4 => 4,
            FeatureLevel::P5 => 5,
        }
    }

    pub fn from_index(l: usize) -> Option<Self> {
        match l {
            2 => Some(FeatureLevel::P2),
            3 => Some(FeatureLevel::P3),
            4 => Some(FeatureLevel::P4),
            5 => Some(FeatureLevel::P5),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channels of C0; level `l` has `base_channels * 2^l`.
    pub base_channels: usize,
    /// Width of the lateral / top-down path before the output projection.
    pub fpn_channels: usize,
    /// Number of encoder levels C0..C{n-1}; inputs must be divisible by `2^(n-1)`.
    pub num_down_levels: usize,
    pub leaky_slope: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            base_channels: 4,
            fpn_channels: 48,
            num_down_levels: 6,
            leaky_slope: 0.01,
        }
    }
}

impl BackboneConfig {
    pub fn top_level(&self) -> usize {
        self.num_down_levels - 1
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Required divisor of every input dimension.
    pub fn divisor(&self) -> usize {
        1 << self.top_level()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.fpn_channels == 0 {
            return Err(Error::Config("backbone: channel counts must be positive".into()));
        }
        if !(3..=6).contains(&self.num_down_levels) {
            return Err(Error::Config(format!(
                "backbone: num_down_levels {} outside 3..=6",
                self.num_down_levels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_blocks: usize,
    pub d_hidden: usize,
    pub d_ffn: usize,
    pub num_heads: usize,
    /// Must be a perfect cube (anchors form an `n x n x n` grid per RoI).
    pub queries_per_class: usize,
    pub input_level: FeatureLevel,
    pub use_mask_restriction: bool,
    pub use_anchors: bool,
    /// Multiplier on normalized coordinates inside the positional encoding.
    pub pe_scale: f64,
    /// Adds the positional encoding to the cross-attention values as well.
    pub pe_in_values: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            num_blocks: 3,
            d_hidden: 96,
            d_ffn: 256,
            num_heads: 4,
            queries_per_class: 27,
            input_level: FeatureLevel::P2,
            use_mask_restriction: true,
            use_anchors: true,
            pe_scale: 1.0,
            pe_in_values: false,
        }
    }
}

impl ModelConfig {
    pub fn anchors_per_axis(&self) -> usize {
        (1..=self.queries_per_class)
            .find(|n| n * n * n >= self.queries_per_class)
            .unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let err = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.num_blocks == 0 || self.d_ffn == 0 || self.num_heads == 0 {
            return err("num_blocks, d_ffn and num_heads must be positive".into());
        }
        if self.d_hidden == 0 || !self.d_hidden.is_multiple_of(6) || !self.d_hidden.is_multiple_of(self.num_heads) {
            return err(format!(
                "d_hidden {} must be a positive multiple of 6 and of num_heads {}",
                self.d_hidden, self.num_heads
            ));
        }
        let n = self.anchors_per_axis();
        if self.queries_per_class == 0 || n * n * n != self.queries_per_class {
            return err(format!("queries_per_class {} is not a perfect cube", self.queries_per_class));
        }
        if self.input_level.index() > self.backbone.top_level() {
            return err(format!(
                "input level {:?} needs more than {} backbone levels",
                self.input_level, self.backbone.num_down_levels
            ));
        }
        if !(self.pe_scale > 0.0 && self.pe_scale.is_finite()) {
            return err("pe_scale must be positive".into());
        }
        Ok(())
    }
}
