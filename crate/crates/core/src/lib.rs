//! One-step latent-residual super-resolution.
//!
//! An LQ image is bicubically upsampled, mapped into a frozen latent space and
//! restored in a single step `z_H = z_L - eps(z_L, c)`. The denoiser is
//! conditioned on patch features of the LQ input through a small MLP adapter,
//! and carries three low-rank adapter sets (pixel, semantic, texture) that are
//! trained one after another and mixed at inference with independent scales.

pub mod autograd;
pub mod codec;
pub mod degrade;
pub mod denoiser;
pub mod error;
pub mod featenc;
pub mod guidance;
pub mod image;
pub mod losses;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::Matrix;
