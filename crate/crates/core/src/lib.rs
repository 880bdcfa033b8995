//! Desk-scale cascaded diffusion pipeline for blind face restoration.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`schedule`]: variance schedules and the scalar diffusion coefficients.
//! - [`diffusion`]: forward/reverse diffusion arithmetic, losses, and the
//!   ELBO truncation-gap quantities.
//! - [`nn`]: the trainable noise predictor (a small U-Net with manual
//!   backpropagation) and its training loop.
//! - [`degrade`]: the blind degradation operator producing LQ-HQ pairs.
//! - [`sampler`]: the cascaded inference pipeline with truncated sampling.
//! - [`metrics`]: PSNR, SSIM, and a Fréchet-Gaussian distance.
//! - [`longtail`]: the long-tail coverage study on a digit dataset.
//! - [`dataio`]: IDX parsing, PNG I/O, and versioned checkpoints.
//! - [`synth`]: deterministic synthetic datasets used by tests and demos.

pub mod dataio;
pub mod degrade;
pub mod diffusion;
pub mod image;
pub mod longtail;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod verify;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
