//! Feature-conditioned latent diffusion for ×4 single-image super-resolution.

pub mod checkpoint;
pub mod codec;
pub mod degradation;
pub mod diffusion;
mod error;
pub mod features;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod sr;
pub mod tiler;
pub mod train;

pub use crate::error::{Error, Result};
pub use crate::image::ImageBuffer;
