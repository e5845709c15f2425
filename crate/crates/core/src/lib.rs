//! Framework-free deep-learning engine for heteroscedastic image
//! translation with Monte-Carlo-dropout uncertainty.
//!
//! - [`tape`]: reverse-mode automatic differentiation over [`tensor::Tensor`]s
//! - [`nn`]: spatial dropout, upsampling block and the U-Net models
//! - [`train`]: heteroscedastic and MSE losses, AdamW, plateau-stopped training
//! - [`uncertainty`]: MC-dropout sampling and variance decomposition
//! - [`synth`]: synthetic paired phantoms, noise, anomalies and patches
//! - [`metrics`]: masked means, bootstrap intervals, MSE/MAE/PSNR
//! - [`pgm`]: 16-bit greymap export

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conv;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pgm;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
