//! Training-free face anonymization by guided latent-diffusion inpainting.
//!
//! The crate is organized bottom-up:
//!
//! * [`schedule`]: noise schedule, reverse timestep plan and per-step σ.
//! * [`masking`]: 19-label parse maps, editable-region masks and compositing.
//! * [`backends`]: model contracts (codec, denoiser, attribute scorer, parser,
//!   identity embedder), an analytic toy backend and a TCP adapter client.
//! * [`sampler`] and [`guidance`]: forward noising, DDIM reverse steps and the
//!   adaptive attribute-guidance correction.
//! * [`metrics`]: Re-ID rate, SSIM and Fréchet distance.
//! * [`pipeline`]: batch anonymization, mask export and evaluation with run
//!   manifests.
//!
//! Batch work goes through [`exec`], which uses rayon when the `parallel`
//! feature is enabled and falls back to a sequential loop otherwise.

pub mod backends;
mod error;
pub mod exec;
pub mod grid;
pub mod guidance;
pub mod masking;
pub mod metrics;
pub mod pipeline;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use grid::{Grid, Image, Latent, Shape};
