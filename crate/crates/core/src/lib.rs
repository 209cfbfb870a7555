//! Gaussian process regression with derivative observations: exact derivative
//! GPs, variational GPs with inducing (directional) derivatives, and a small
//! LCB Bayesian-optimization harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bo;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod exact_gp;
pub mod kernels;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod posterior;
pub mod variational;

pub use error::{Error, Result};
pub use linalg::{CholeskyFactor, Matrix};
