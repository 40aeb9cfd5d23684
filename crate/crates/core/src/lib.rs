//! Joint depth-from-defocus and deblurring with a two-headed network.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode tape with
//!   the convolution, normalisation and elementwise operators the network
//!   needs.
//! - [`optics`]: thin-lens circle-of-confusion maps and depth-dependent
//!   Gaussian defocus synthesis.
//! - [`model`]: the shared encoder with depth and deblurring decoders, plus
//!   the checkpoint format.
//! - [`loss`], [`metrics`]: training objectives and evaluation metrics.
//! - [`data`]: image/depth I/O, manifests, synthetic scenes and batching.
//! - [`train`]: the training loop, head ablation and loss-variant grid.
//! - [`gradcheck`]: finite-difference verification of every backward rule.

// `!(x > 0.0)` is how parameter checks reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optics;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
