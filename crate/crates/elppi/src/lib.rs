//! Empirical-likelihood prediction-powered inference.
//!
//! The library combines a small labeled sample `(X_i, Y_i, Ytilde_i)` with a
//! large unlabeled sample `(X_j, Ytilde_j)` carrying machine predictions
//! `Ytilde`. Predictions enter only through auxiliary functions whose pooled
//! mean is used as an extra empirical-likelihood constraint, so the resulting
//! estimators and tests stay valid no matter how poor the predictions are,
//! and recover the efficiency gains when they are informative.
//!
//! Module map:
//! - [`model`]: moment models, datasets, CSV and config I/O
//! - [`el`]: the inner empirical-likelihood solver (weights, multipliers)
//! - [`auxiliary`]: auxiliary constraint construction (bases, cross-fitting)
//! - [`estimator`]: point estimation (two-step and full profile)
//! - [`infer`]: plug-in moments, variance and test calibration, intervals
//! - [`dist`]: calibrated distribution estimates and quantile bands
//! - [`baselines`]: supervised and prediction-powered baselines
//! - [`harness`]: data generators and the Monte Carlo experiment driver

pub mod auxiliary;
pub mod baselines;
pub mod dist;
pub mod el;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod infer;
pub mod model;
pub mod numeric;

pub use error::{Error, Result};
