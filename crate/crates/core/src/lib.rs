//! CDFormer: a hybrid 1D-CNN / deep-residual-shrinkage / transformer-encoder
//! regressor for lithium-ion battery capacity forecasting, with the temporal
//! augmentations, data pipeline, training loop and metrics around it.
//!
//! Everything runs on a small in-crate reverse-mode autodiff ([`tape`]) over
//! dense `f64` tensors.

// `!(x > 0.0)` style guards are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
mod kernels;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
