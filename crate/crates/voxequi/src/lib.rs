//! Voxel-based molecular denoising and rotational-equivariance measurement.
//!
//! The crate voxelizes molecules as per-element Gaussian densities, trains
//! or wraps denoisers, runs walk-jump sampling from rotated seeds, and
//! measures learned equivariance: the reconstruction-equivariance criterion,
//! the exact MSE loss decomposition into prediction and equivariance error,
//! latent cosine similarity, and generation-quality metrics.

pub mod denoisers;
pub mod equiv;
pub mod error;
pub mod geom;
pub mod harness;
pub mod mol_io;
pub mod molmetrics;
pub mod rng;
pub mod tinynet;
pub mod voxel;
pub mod wjs;

pub use error::{Result, VoxError};
