use serde::{Deserialize, Serialize};

use super::link::LinkFunction;
use super::GeeError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorCheck {
    /// `E[g⁻¹(η)]` for `η ~ N(mean, var)`, by quadrature.
    pub exact: f64,
    /// First-order approximation `g⁻¹(mean)`.
    pub approx: f64,
    /// `g⁻¹(mean) + ½ (g⁻¹)″(mean)·var`
    pub second_order: f64,
}

impl TaylorCheck {
    pub fn relative_error(&self) -> f64 {
        (self.exact - self.approx).abs() / self.exact.abs().max(f64::MIN_POSITIVE)
    }
}

/// How far the mean of a transformed normal linear predictor is from the
/// transformed mean.
pub fn taylor_mean_check(link: LinkFunction, mean: f64, var: f64) -> Result<TaylorCheck, GeeError> {
    // negated so NaN fails the check
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(var >= 0.0) || !mean.is_finite() || !var.is_finite() {
        return Err(GeeError::QuadratureFailure(format!(
            "invalid normal parameters ({mean}, {var})"
        )));
    }
    let approx = link.inverse(mean);
    let second_order = approx + 0.5 * link.d2_inverse(mean) * var;
    if var == 0.0 || link == LinkFunction::Identity {
        return Ok(TaylorCheck {
            exact: approx,
            approx,
            second_order,
        });
    }
    let sd = var.sqrt();
    let f = |z: f64| {
        link.inverse(mean + sd * z) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
    };
    let exact = adaptive_simpson(&f, -12.0, 12.0, 1e-14, 40)?;
    if !exact.is_finite() {
        return Err(GeeError::QuadratureFailure("non-finite integral".into()));
    }
    Ok(TaylorCheck {
        exact,
        approx,
        second_order,
    })
}

fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    depth: usize,
) -> Result<f64, GeeError> {
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> Result<f64, GeeError> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if !diff.is_finite() {
        return Err(GeeError::QuadratureFailure(
            "integrand is not finite".into(),
        ));
    }
    if diff.abs() <= 15.0 * tol {
        return Ok(left + right + diff / 15.0);
    }
    if depth == 0 {
        return Err(GeeError::QuadratureFailure(
            "maximum subdivision depth reached".into(),
        ));
    }
    Ok(
        simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?
            + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?,
    )
}
