//! Gaussian-process regression and classification with grid inducing inputs,
//! a Tensor-Train variational mean and a Kronecker-structured covariance.

pub mod checkpoint;
pub mod data;
pub mod demo;
pub mod elbo;
pub mod error;
pub mod interp;
pub mod kernels;
pub mod kron;
pub mod model;
pub mod train;
pub mod tt;

pub use error::{CheckpointError, Error, Result};
