//! Multi-agent trajectory forecasting with a vector-quantized autoencoder
//! whose codebook is adapted per instance through a low-rank update, a
//! discrete diffusion prior over the code indices, and a k-means centroid
//! sampling strategy evaluated with best-of-K displacement metrics.
//!
//! The crate is organized around the two training stages:
//!
//! 1. [`train::train_stage_one`] fits the social-temporal encoders, decoder
//!    and codebook with a reconstruction + embedding + commitment loss.
//! 2. [`train::train_stage_two`] freezes stage one and fits a mask-and-replace
//!    discrete diffusion prior over the resulting token sequences.
//!
//! [`sampler::evaluate_dataset`] then draws N trajectory guesses per agent,
//! condenses them into K centroids with k-means, and scores ADE/FDE under the
//! best-of-K protocol.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
pub use tensor::Tensor;
