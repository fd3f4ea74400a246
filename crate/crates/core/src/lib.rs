//! Desk-scale video inpainting by flow-guided first-frame latent filling.
//!
//! The crate generates a synthetic clip corpus with exact motion ground truth,
//! trains a small 2D latent autoencoder and a 3D denoising UNet on it, fills
//! the first frame's masked latent cells by warping later frames through
//! composed flows, aligns the remaining noise with a deformable module, and
//! samples the result with a deterministic DDIM loop. A metrics harness scores
//! outputs (PSNR, SSIM, warp error, a Frechet proxy) and drives ablations.
//!
//! All numerics run in f64; files store f32 arrays and 8-bit PNG frames.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod fff;
pub mod flowlab;
pub mod metrics;
pub mod nn;
pub mod npz;
pub mod pipeline;
pub mod types;
pub mod unet3d;
pub mod vae2d;

pub use config::RunConfig;
pub use diffusion::{NoiseProvenance, NoiseSchedule, NoisyLatent};
pub use error::CoreError;
pub use fff::PropagatedLatent;
pub use flowlab::{FlowField, ValidityMap};
pub use types::{GroundTruth, LatentClip, MaskSequence, VideoClip};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;
