//! Aliasing-aware patch embedding for spectrogram transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`windows`]: window functions, local spectra and the single-tone
//!   learnability experiment.
//! - [`sblu`]: closed-form bilateral Laplace unit maths with static kernels,
//!   the `gamma` normalisation, parameter bounds and the ZOH derivation check.
//! - [`adaptive_conv`]: the fused input-dependent depthwise convolution with
//!   its analytic backward pass and a kernel-materialising oracle.
//! - [`autodiff`]: a small reverse-mode engine with the dense, attention and
//!   normalisation layers needed by the stem and the training harness.
//! - [`aape`]: the full patch-embedding stem.
//! - [`ssl`]: masked teacher-student pretraining at desk scale.
//! - [`io`] and [`config`]: binary tensor/checkpoint formats and run configs.

pub mod aape;
pub mod adaptive_conv;
pub mod autodiff;
pub mod checks;
pub mod config;
pub mod error;
pub mod io;
pub mod rng;
pub mod sblu;
pub mod ssl;
pub mod windows;

pub use error::{Error, Result};
