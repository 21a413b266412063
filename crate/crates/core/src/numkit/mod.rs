//! Dense linear algebra and stochastic primitives shared by the fitting and
//! simulation code.
//!
//! Matrices are `nalgebra` dynamic matrices. The functions here add the
//! explicit failure modes the estimators rely on: a fixed singularity
//! threshold for linear solves, eigenvalue clipping for covariance square
//! roots, and reproducible random streams keyed by `(seed, stream)`.

mod bvn;
mod diff;
mod linalg;
mod mvn;
mod rng;

pub use bvn::{bivariate_normal_cdf, bivariate_normal_pdf, normal_cdf, normal_quantile};
pub use diff::{numerical_jacobian, numerical_jacobian_with_step};
pub use linalg::{
    inverse, is_symmetric, max_abs, solve_linear_system, solve_vector, symmetrize,
    SINGULAR_RELATIVE_TOL,
};
pub use mvn::{mvn_sample, psd_sqrt, MvnSampler, NEGATIVE_EIGEN_TOL};
pub use rng::RngStream;

pub use nalgebra::{DMatrix as Matrix, DVector as Vector};

use thiserror::Error;

/// Failures raised by the numeric primitives.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("matrix is numerically singular (pivot {pivot:.3e} below threshold {threshold:.3e})")]
    SingularMatrix { pivot: f64, threshold: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("covariance is not positive semi-definite (eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}
