//! Gaussian process regression networks: multi-output regression with
//! input-dependent signal and noise correlations.
//!
//! Outputs are modeled as y(x) = W(x) [f(x) + sigma_f eps] + sigma_y z, where
//! the entries of the mixing matrix W(x) and the latent node functions f(x)
//! are independent Gaussian processes. The crate provides the model and its
//! block-structured prior, elliptical slice sampling and mean-field
//! variational inference, analytic and mixture predictive distributions,
//! multivariate-volatility extraction, evaluation metrics, dataset I/O, and
//! a synthetic-data generator with known ground truth.

pub mod data;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod mcmc;
pub mod metrics;
pub mod model;
pub mod prediction;
pub mod rng;
pub mod synthetic;
pub mod vb;

pub use error::{GprnError, Result};
