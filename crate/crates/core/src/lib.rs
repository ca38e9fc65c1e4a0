//! Semantic-map-conditioned synthesis of 3D medical volumes with a latent
//! diffusion model.
//!
//! A VQ-GAN compresses volumes into a quantized latent grid; a U-Net denoiser
//! with SPADE conditioning learns to reverse a cosine-scheduled diffusion
//! process in that latent space, guided by a one-hot semantic map. The crate
//! also ships the evaluation metrics and a segmentation-based faithfulness
//! check.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod autograd;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod latent_space;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod volume_io;
pub mod vqgan;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor, used for training and checkpoints.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used by gradient checks and oracles.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Volume32 = volume_io::Volume<f32>;
pub type Volume64 = volume_io::Volume<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type Codebook32 = vqgan::Codebook<f32>;
pub type Codebook64 = vqgan::Codebook<f64>;
pub type Dataset32 = volume_io::Dataset<f32>;
pub type Dataset64 = volume_io::Dataset<f64>;
