//! Variational Bayesian encoder–decoder segmentation.
//!
//! Weights carry mean-field Gaussian posteriors trained by minimising the
//! negated evidence lower bound; predictions are Monte-Carlo averaged and
//! their variance split into aleatoric and epistemic parts.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod network;
pub mod objective;
pub mod selftest;
pub mod trainer;
pub mod uncertainty;
pub mod variational;

pub use error::{Error, Result};
pub use grid::Grid;
