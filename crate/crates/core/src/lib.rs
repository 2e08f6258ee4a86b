//! Switchable whitening for dense `(N, C, H, W)` activations.
//!
//! The layer mixes the mean/covariance statistics of several normalization
//! methods (batch whitening, instance whitening, and the diagonal
//! batch/instance/layer standardizations) with softmax importance weights,
//! whitens each sample with the mixed statistics, and applies a per-channel
//! affine transform. Both an exact eigendecomposition path (ZCA) and a
//! Newton-Schulz iteration path are provided for the inverse square root,
//! together with the full analytic backward pass for training.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the default `std`
//! feature only toggles `std::error::Error` support and dependency features.
//! File formats, IO, and the command-line driver live in the companion
//! `swhite-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod stats;
pub mod sw;
pub mod tensor;
pub mod trainer;
pub mod whitening;

mod scalar;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
