//! Attention-gated U-Net.

mod attention;
mod config;
mod unet;

pub use attention::{apply_coefficients, attention_gate, AttentionGate, AttentionGateParams};
pub use config::{ModelConfig, NormKind, UpsampleKind, DEPTH};
pub use unet::{AttentionUNet, ConvBlock, LevelShapes};

use crate::error::Result;
use crate::nn::{FeatureMap, Mode};
use crate::scalar::Scalar;

/// Builds a freshly initialized network from a validated configuration.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<AttentionUNet<T>> {
    AttentionUNet::new(config.clone(), seed)
}

/// Anything that maps a batch of images to per-pixel probabilities.
pub trait Segmenter<T: Scalar> {
    fn predict(&mut self, batch: &FeatureMap<T>) -> Result<FeatureMap<T>>;
}

impl<T: Scalar> Segmenter<T> for AttentionUNet<T> {
    fn predict(&mut self, batch: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.forward(batch, Mode::Eval)
    }
}
