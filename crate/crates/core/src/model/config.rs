use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of encoder/decoder levels; the network is always four deep.
pub const DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    Batch,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleKind {
    TransposedConv,
    #[serde(rename = "bilinear+conv")]
    BilinearConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub norm: NormKind,
    pub upsample: UpsampleKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 64,
            depth: DEPTH,
            norm: NormKind::Batch,
            upsample: UpsampleKind::TransposedConv,
        }
    }
}

impl ModelConfig {
    pub fn with_base_channels(mut self, base_channels: usize) -> Self {
        self.base_channels = base_channels;
        self
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if self.base_channels < 8 || !self.base_channels.is_power_of_two() {
            return Err(Error::Config(format!(
                "base_channels must be a power of two >= 8, got {}",
                self.base_channels
            )));
        }
        if self.depth != DEPTH {
            return Err(Error::Config(format!("depth must be {DEPTH}, got {}", self.depth)));
        }
        Ok(())
    }

    /// Channel width of encoder level `level` (0 = full resolution).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_width(&self) -> usize {
        self.width(DEPTH)
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << DEPTH
    }
}
