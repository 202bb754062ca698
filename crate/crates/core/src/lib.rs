//! Text-conditioned Gaussian diffusion trained with a per-timestep
//! weighted variational bound.
//!
//! Everything here is pure computation over `alloc` containers: noise
//! schedules, the forward process and its posterior, the conditioning path,
//! a small patch-transformer noise predictor with exact gradients, the
//! training loop with moving-average self-training, ancestral sampling and
//! the evaluation metrics. File formats and the command line live in the
//! `kldiff` crate.
#![cfg_attr(all(not(feature = "std"), not(test)), no_std)]

extern crate alloc;

pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod sampler;
pub mod scene;
pub mod schedules;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
