//! Wavelet-packet forecasting: transforms, Chebyshev KAN kernels, the
//! WaveTuner model, training and data handling.

// Negated float comparisons in this crate are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod data;
pub mod error;
pub mod kernels;
pub mod model;
pub mod params;
pub mod revin;
pub mod training;
pub mod wavelet;

pub use error::{Error, ErrorKind, Result};
