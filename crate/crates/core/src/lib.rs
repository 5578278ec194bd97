//! Desk-scale laboratory for quantization-robust neural network training.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`]), fake quantizers
//! ([`quantizer`]), closed-form quantization error models ([`error_model`]), the symmetry
//! regularizer and saturating weight nonlinearity ([`regularizers`]), a trainer for small
//! MLP/CNN models with (A)SAM and learned-step QAT ([`trainer`]), and the measurement
//! procedures behind the `robquant` command-line tool ([`harness`]).

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod error_model;
pub mod harness;
mod kernels;
pub mod model;
pub mod quantizer;
pub mod regularizers;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
