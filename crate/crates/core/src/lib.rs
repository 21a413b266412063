//! Exposure measurement error correction for longitudinal studies with
//! discrete (or general-link) outcomes.
//!
//! The estimator works in two steps. A linear measurement error model for the
//! true exposure given the surrogate, time and covariates is fitted in a
//! validation study (OLS for one record per subject, GEE otherwise). The
//! predicted true exposures then feed an exposure-history functional such as
//! the cumulative average, and the outcome model is fitted by GEE with the
//! corrected history in place of the error-prone one. Standard errors come
//! from the stacked sandwich of both estimating functions, so the uncertainty
//! of the calibration step propagates into the outcome coefficients.
//!
//! # Modules
//!
//! - [`numkit`]: linear algebra, random streams, normal distribution helpers
//! - [`dataset`]: longitudinal panels, studies, CSV ingestion and validation
//! - [`exposure`]: history functionals and calibrated exposure prediction
//! - [`mem`]: measurement error model fits and assumption diagnostics
//! - [`gee`]: link/variance functions, working correlations, GEE solver
//! - [`correct`]: corrected estimators, stacked sandwich, inverse-variance weighting
//! - [`simlab`]: data-generating process, replicate harness, metrics
//! - [`exec`]: ordered data-parallel mapping with a sequential fallback

pub mod correct;
pub mod dataset;
pub mod exec;
pub mod exposure;
pub mod gee;
pub mod mem;
pub mod numkit;
pub mod simlab;

mod error;

pub use error::{Error, Result};

/// Two-sided 95% normal quantile used for every Wald interval.
pub const Z_95: f64 = 1.959964;
