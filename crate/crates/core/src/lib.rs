//! Differentially private data-free knowledge distillation on small dense
//! networks, with a Rényi-DP accountant.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod cli;
pub mod datasets;
pub mod distill;
pub mod dpmech;
mod error;
pub mod nnkit;
pub mod tensor;

pub use error::{Error, Result};
