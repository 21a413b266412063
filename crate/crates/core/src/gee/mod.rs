//! Generalized estimating equations for clustered responses.
//!
//! [`solve_gee`] fits a marginal mean model `g(μ) = Xβ` with working
//! covariance `φ A^{1/2} R A^{1/2}`. Per-subject terms are exposed through
//! [`cluster_terms`] so the corrected estimator can differentiate the
//! outcome equations with respect to the calibration parameters.

mod corr;
mod link;
mod solver;
mod taylor;

pub use corr::{estimate_rho, CorrStructure, Residuals, WorkingCorrelation};
pub use link::{LinkFunction, VarianceFunction};
pub use solver::{
    all_terms, cluster_terms, estimating_function, solve_gee, solve_gee_fixed, update_params,
    Cluster, ClusterTerms, GeeFit, GeeOptions, GeeSpec, WorkingParams,
};
pub use taylor::{taylor_mean_check, TaylorCheck};

use thiserror::Error;

use crate::numkit::NumError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeeError {
    #[error("no clusters supplied")]
    Empty,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("response {value} in cluster {cluster} is outside the variance function's support")]
    InvalidResponse { cluster: usize, value: f64 },
    #[error("design is rank deficient")]
    RankDeficientDesign,
    #[error("separation suspected: |η| > 30 at {:.1}% of points", 100.0 * fraction)]
    SeparationSuspected { fraction: f64 },
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("no within-subject pairs to estimate the working correlation")]
    InsufficientPairs,
    #[error("working correlation matrix is not positive definite")]
    CorrelationNotPd,
    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

impl GeeError {
    pub fn is_numerical(&self) -> bool {
        !matches!(
            self,
            GeeError::Empty | GeeError::DimensionMismatch(_) | GeeError::InvalidResponse { .. }
        )
    }
}
