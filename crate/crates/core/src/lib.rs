//! Photon-limited HDR imaging: a realistic sensor forward model for
//! synthesizing noisy exposure brackets, the SV-HDR fusion network with
//! verified gradients and a small training loop, a classical noise-aware
//! merge, and the PSNR / MS-SSIM evaluation metrics.

pub mod error;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod rng;
pub mod scene;
pub mod sensor;
pub mod transforms;

pub use error::{Error, Result};
