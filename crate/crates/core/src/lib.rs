//! Coarse-to-fine hierarchical image classification.
//!
//! The crate holds a small reverse-mode autodiff engine, builders for a
//! VGG16-style baseline and its branched hierarchical variant, the weighted
//! multi-level loss with epoch schedules, a histopathology patch pipeline
//! (tiling, stain normalization, autoencoder filtering), evaluation metrics,
//! and the dataset/pipeline plumbing that ties them together.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Real, Scalar};
pub use tensor::Tensor;
