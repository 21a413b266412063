use nalgebra::{DMatrix, DVector};

use super::NumError;

/// Pivots smaller than this multiple of `max|a|` are treated as zero.
pub const SINGULAR_RELATIVE_TOL: f64 = 1e-12;

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Solves `a · x = b` by LU decomposition with partial pivoting.
///
/// Fails with [`NumError::SingularMatrix`] when any pivot of the factorization
/// falls below `1e-12 · max|a|`.
pub fn solve_linear_system(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, NumError> {
    if !a.is_square() {
        return Err(NumError::DimensionMismatch(format!(
            "coefficient matrix is {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if b.nrows() != a.nrows() {
        return Err(NumError::DimensionMismatch(format!(
            "right-hand side has {} rows, expected {}",
            b.nrows(),
            a.nrows()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(NumError::NonFinite("linear system input".into()));
    }
    let scale = max_abs(a);
    let threshold = SINGULAR_RELATIVE_TOL * scale;
    let lu = a.clone().lu();
    let u = lu.u();
    let min_pivot = u
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if scale == 0.0 || min_pivot < threshold {
        return Err(NumError::SingularMatrix {
            pivot: min_pivot,
            threshold,
        });
    }
    lu.solve(b).ok_or(NumError::SingularMatrix {
        pivot: min_pivot,
        threshold,
    })
}

pub fn solve_vector(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, NumError> {
    let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = solve_linear_system(a, &rhs)?;
    Ok(x.column(0).into_owned())
}

pub fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>, NumError> {
    solve_linear_system(a, &DMatrix::identity(a.nrows(), a.nrows()))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let n = a.nrows();
    (0..n).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= tol * (1.0 + a[(i, j)].abs())))
}
