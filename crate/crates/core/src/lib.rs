//! Hyperparameter optimization as a bilevel program, approximated by
//! unrolled differentiation (UD) or by cross-validation over random
//! candidates (CV), together with the stability and generalization bounds
//! that describe both.
//!
//! * [`autodiff`]: a reverse-mode tape whose backward pass can itself be
//!   recorded, so gradients can flow through gradient steps.
//! * [`models`]: inner/outer loss pairs for the supported tasks.
//! * [`bilevel`]: the UD and CV algorithms.
//! * [`bounds`]: closed-form bound evaluators and empirical probes.
//! * [`data`]: IDX loading, synthetic data, label noise and splits.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bilevel;
pub mod bounds;
pub mod data;
pub mod error;
pub mod models;
pub mod tensor;

pub use error::{Error, Result};
