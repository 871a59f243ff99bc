//! Lung-infection segmentation on CT slices with an attention-gated U-Net
//! trained under a hybrid region/boundary loss.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod ablation;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracles;
pub mod scalar;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type UNet32 = model::AttentionUNet<f32>;
pub type UNet64 = model::AttentionUNet<f64>;
pub type FeatureMap32 = nn::FeatureMap<f32>;
pub type FeatureMap64 = nn::FeatureMap<f64>;
pub type Checkpoint32 = train::Checkpoint<f32>;
