use nalgebra::{DMatrix, DVector};

use super::{NumError, RngStream};

/// Eigenvalues of a symmetrized covariance below this are rejected; values
/// between it and zero are clipped to zero.
pub const NEGATIVE_EIGEN_TOL: f64 = -1e-8;

/// Symmetric square-root factor `L` with `L·Lᵀ = cov`, built from the
/// eigendecomposition of the symmetrized input.
pub fn psd_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, NumError> {
    if !cov.is_square() {
        return Err(NumError::DimensionMismatch(format!(
            "covariance is {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(NumError::NonFinite("covariance".into()));
    }
    let sym = super::symmetrize(cov);
    let eig = sym.symmetric_eigen();
    let mut roots = eig.eigenvalues.clone();
    for lambda in roots.iter_mut() {
        if *lambda < NEGATIVE_EIGEN_TOL {
            return Err(NumError::NotPsd(*lambda));
        }
        *lambda = lambda.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Precomputed multivariate normal sampler.
#[derive(Debug, Clone)]
pub struct MvnSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl MvnSampler {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self, NumError> {
        if cov.nrows() != mean.len() {
            return Err(NumError::DimensionMismatch(format!(
                "mean has length {}, covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self {
            factor: psd_sqrt(cov)?,
            mean,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut RngStream) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.standard_normal());
        &self.mean + &self.factor * z
    }
}

pub fn mvn_sample(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut RngStream,
) -> Result<DVector<f64>, NumError> {
    Ok(MvnSampler::new(mean.clone(), cov)?.sample(rng))
}
