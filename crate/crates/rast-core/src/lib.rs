//! Retrieval-augmented spatio-temporal forecasting engine.
//!
//! The crate is organized bottom up: [`tensor`] provides reverse-mode
//! autodiff, [`nn`] the learned building blocks, [`encoder`] the decoupled
//! spatial and temporal encoders plus the query generator, [`store`] the
//! dual-bank pattern memory with approximate search, [`fusion`] retrieval
//! and cross-attention, [`predictor`] the backbone and output head,
//! [`model`] the assembled network, and [`harness`]-level modules
//! ([`config`], [`data`], [`metrics`], [`optim`], [`train`], [`bench`])
//! drive training and evaluation.
//!
//! Everything is generic over the element type through [`scalar::Scalar`];
//! use the [`F32`]/[`F64`] aliases for concrete tensors.

pub mod bench;
mod bytes;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod predictor;
pub mod scalar;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;

/// Single precision tensor, the default for training runs.
pub type TensorF32 = Tensor<f32>;
/// Double precision tensor, used by gradient checks and test mode.
pub type TensorF64 = Tensor<f64>;

/// Default run precision.
pub type F32 = f32;
/// Test and verification precision.
pub type F64 = f64;
