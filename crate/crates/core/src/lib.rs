//! Sentinel: an encoder-decoder transformer for multivariate time-series
//! forecasting built around multi-patch attention.
//!
//! The encoder attends across channels within each patch, the decoder attends
//! causally across patches within each channel, and both share one set of
//! Q/K/V projections across all slices instead of splitting into heads.
//!
//! Everything runs on the in-crate [`tensor`] engine (dense `f64` tensors with
//! reverse-mode autodiff). Large kernels and independent experiment cells run
//! on rayon when the `parallel` feature is enabled (the default).

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod preprocessing;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, SentinelModel, Variant};
pub use rng::Rng;
pub use tensor::Tensor;
