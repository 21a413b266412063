use nalgebra::{DMatrix, DVector};

use super::NumError;

/// Central-difference Jacobian with the default step `1e-6·(1+|xⱼ|)`.
pub fn numerical_jacobian<F>(f: F, x: &DVector<f64>) -> Result<DMatrix<f64>, NumError>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    numerical_jacobian_with_step(f, x, 1e-6)
}

/// Central-difference Jacobian `J[i,j] ≈ ∂fᵢ/∂xⱼ` with step `h·(1+|xⱼ|)`.
pub fn numerical_jacobian_with_step<F>(
    mut f: F,
    x: &DVector<f64>,
    h: f64,
) -> Result<DMatrix<f64>, NumError>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let f0 = f(x);
    check_finite(&f0)?;
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    let mut probe = x.clone();
    for j in 0..x.len() {
        let step = h * (1.0 + x[j].abs());
        probe[j] = x[j] + step;
        let up = f(&probe);
        probe[j] = x[j] - step;
        let down = f(&probe);
        probe[j] = x[j];
        check_finite(&up)?;
        check_finite(&down)?;
        if up.len() != f0.len() || down.len() != f0.len() {
            return Err(NumError::DimensionMismatch(
                "function output length changed between evaluations".into(),
            ));
        }
        jac.set_column(j, &((up - down) / (2.0 * step)));
    }
    Ok(jac)
}

fn check_finite(v: &DVector<f64>) -> Result<(), NumError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NumError::NonFinite("function evaluation".into()))
    }
}
