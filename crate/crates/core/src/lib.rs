//! Two-stage estimation of heterogeneous exposures in panels with latent
//! common factors.
//!
//! Stage 1 defactors semi-endogenous regressors and fits unit-specific IV
//! regressions. Stage 2 extracts the leading principal component of the
//! Stage-1 residuals and selects observable proxies for it with Multiple
//! Testing Boosting. Mean Group aggregation, a Monte Carlo harness for the
//! selection step, and feature construction from raw price data complete the
//! crate.

pub mod error;
pub mod features;
pub mod linalg;
pub mod meangroup;
pub mod montecarlo;
pub mod panel;
pub mod selection;
pub mod stage1;
pub mod stage2;
pub mod synthetic;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
