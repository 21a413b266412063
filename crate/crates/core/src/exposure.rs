//! Exposure-history functionals and calibrated prediction of the true exposure.
//!
//! Both functionals treat the exposure as a left-continuous step function:
//! the value measured at `t_k` holds on `[t_k, t_{k+1})`. The history at `t_j`
//! therefore depends on values strictly before `t_j`, except at the first
//! point where it is the first value itself. Every functional is linear in
//! the exposure values, so it is represented by a lower-triangular weight
//! matrix; the corrected estimator differentiates through those weights.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExposureError {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("times are not strictly increasing at index {0}")]
    NonMonotoneTimes(usize),
    #[error("empty exposure series")]
    Empty,
    #[error("moving-average window must be positive and finite, got {0}")]
    InvalidWindow(f64),
    #[error("cannot parse functional `{0}` (expected `cumavg` or `movavg:<window>`)")]
    Parse(String),
}

/// Exposure-history function `h(·)` applied to a subject's exposure series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum HistoryFunctional {
    CumulativeAverage,
    /// Time-weighted average over the half-open window `(t_j − window, t_j]`.
    MovingAverage {
        window: f64,
    },
}

/// Linear representation `h = weights · values` of a functional on fixed times.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWeights {
    pub matrix: DMatrix<f64>,
    /// `false` where the functional is undefined (no data in the window).
    pub available: Vec<bool>,
}

impl HistoryWeights {
    pub fn apply(&self, values: &[f64]) -> Vec<Option<f64>> {
        (0..self.matrix.nrows())
            .map(|j| {
                self.available[j].then(|| {
                    self.matrix
                        .row(j)
                        .iter()
                        .zip(values)
                        .map(|(w, v)| if *w == 0.0 { 0.0 } else { w * v })
                        .sum()
                })
            })
            .collect()
    }
}

impl HistoryFunctional {
    pub fn check(&self) -> Result<(), ExposureError> {
        match *self {
            HistoryFunctional::MovingAverage { window }
                if !(window > 0.0 && window.is_finite()) =>
            {
                Err(ExposureError::InvalidWindow(window))
            }
            _ => Ok(()),
        }
    }

    pub fn weights(&self, times: &[f64]) -> Result<HistoryWeights, ExposureError> {
        self.check()?;
        check_times(times)?;
        Ok(match *self {
            HistoryFunctional::CumulativeAverage => cumulative_weights(times),
            HistoryFunctional::MovingAverage { window } => moving_weights(times, window),
        })
    }

    pub fn apply(&self, times: &[f64], values: &[f64]) -> Result<Vec<Option<f64>>, ExposureError> {
        check_lengths(times, values)?;
        Ok(self.weights(times)?.apply(values))
    }
}

impl std::fmt::Display for HistoryFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HistoryFunctional::CumulativeAverage => write!(f, "cumavg"),
            HistoryFunctional::MovingAverage { window } => write!(f, "movavg:{window}"),
        }
    }
}

impl std::str::FromStr for HistoryFunctional {
    type Err = ExposureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("cumavg") {
            return Ok(HistoryFunctional::CumulativeAverage);
        }
        if let Some(w) = s.strip_prefix("movavg:") {
            let window: f64 = w
                .trim()
                .parse()
                .map_err(|_| ExposureError::Parse(s.into()))?;
            let f = HistoryFunctional::MovingAverage { window };
            f.check()?;
            return Ok(f);
        }
        Err(ExposureError::Parse(s.into()))
    }
}

impl TryFrom<String> for HistoryFunctional {
    type Error = ExposureError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<HistoryFunctional> for String {
    fn from(f: HistoryFunctional) -> String {
        f.to_string()
    }
}

fn check_times(times: &[f64]) -> Result<(), ExposureError> {
    if times.is_empty() {
        return Err(ExposureError::Empty);
    }
    // negated so NaN fails the check
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    match (1..times.len()).find(|&j| !(times[j] > times[j - 1])) {
        Some(j) => Err(ExposureError::NonMonotoneTimes(j)),
        None => Ok(()),
    }
}

fn check_lengths(times: &[f64], values: &[f64]) -> Result<(), ExposureError> {
    if times.len() != values.len() {
        return Err(ExposureError::LengthMismatch {
            expected: times.len(),
            got: values.len(),
        });
    }
    Ok(())
}

fn cumulative_weights(times: &[f64]) -> HistoryWeights {
    let m = times.len();
    let mut w = DMatrix::zeros(m, m);
    w[(0, 0)] = 1.0;
    for j in 1..m {
        let span = times[j] - times[0];
        for k in 0..j {
            w[(j, k)] = (times[k + 1] - times[k]) / span;
        }
    }
    HistoryWeights {
        matrix: w,
        available: vec![true; m],
    }
}

fn moving_weights(times: &[f64], window: f64) -> HistoryWeights {
    let m = times.len();
    let mut w = DMatrix::zeros(m, m);
    let mut available = vec![true; m];
    w[(0, 0)] = 1.0;
    for j in 1..m {
        let tj = times[j];
        let lo = (tj - window).max(times[0]);
        // at least one measurement must fall inside the open window
        available[j] = times[..j].iter().any(|&tk| tk > tj - window);
        let span = tj - lo;
        for k in 0..j {
            let overlap = (times[k + 1].min(tj) - times[k].max(lo)).max(0.0);
            w[(j, k)] = overlap / span;
        }
    }
    HistoryWeights {
        matrix: w,
        available,
    }
}

/// Cumulative average: `out[0] = values[0]` and, for `j ≥ 1`,
/// `Σ_{k<j} (t_{k+1} − t_k)·values[k] / (t_j − t_0)`.
pub fn cumulative_average(times: &[f64], values: &[f64]) -> Result<Vec<f64>, ExposureError> {
    Ok(HistoryFunctional::CumulativeAverage
        .apply(times, values)?
        .into_iter()
        .map(|v| v.unwrap_or(f64::NAN))
        .collect())
}

/// Moving average over `(t_j − window, t_j]`; `None` where no measurement
/// falls inside the window.
pub fn moving_average(
    times: &[f64],
    values: &[f64],
    window: f64,
) -> Result<Vec<Option<f64>>, ExposureError> {
    HistoryFunctional::MovingAverage { window }.apply(times, values)
}

/// Column layout of the linear measurement error model
/// `E[c | C, t, W] = α₀ + α₁C + α₂t + α₃C·t + W_selᵀα₄`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemDesign {
    /// Include the surrogate-by-time column.
    pub interaction: bool,
    /// Indices of the covariate columns used by the model.
    pub covariates: Vec<usize>,
}

impl MemDesign {
    pub fn full(p: usize) -> Self {
        Self {
            interaction: true,
            covariates: (0..p).collect(),
        }
    }

    pub fn without_interaction(p: usize) -> Self {
        Self {
            interaction: false,
            covariates: (0..p).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        3 + usize::from(self.interaction) + self.covariates.len()
    }

    pub fn row(&self, surrogate: f64, t: f64, w: &[f64]) -> Vec<f64> {
        let mut r = Vec::with_capacity(self.dim());
        r.extend([1.0, surrogate, t]);
        if self.interaction {
            r.push(surrogate * t);
        }
        r.extend(self.covariates.iter().map(|&k| w[k]));
        r
    }

    pub fn labels(&self, covariate_names: &[String]) -> Vec<String> {
        let mut l: Vec<String> = ["intercept", "surrogate", "time"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if self.interaction {
            l.push("surrogate:time".into());
        }
        l.extend(self.covariates.iter().map(|&k| {
            covariate_names
                .get(k)
                .cloned()
                .unwrap_or_else(|| format!("W{}", k + 1))
        }));
        l
    }

    pub fn predict(
        &self,
        alpha: &[f64],
        surrogate: f64,
        t: f64,
        w: &[f64],
    ) -> Result<f64, ExposureError> {
        if alpha.len() != self.dim() {
            return Err(ExposureError::LengthMismatch {
                expected: self.dim(),
                got: alpha.len(),
            });
        }
        Ok(dot(alpha, &self.row(surrogate, t, w)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `α₀ + α₁C + α₂t + α₃C·t + Wᵀα₄` for the full linear design (`len(α) = 4 + p`).
pub fn predict_true_exposure(
    alpha: &[f64],
    surrogate: f64,
    t: f64,
    w: &[f64],
) -> Result<f64, ExposureError> {
    MemDesign::full(w.len()).predict(alpha, surrogate, t, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Step-function integral of the left-continuous exposure over (lo, hi),
    /// by fine midpoint sampling.
    fn brute_window_average(times: &[f64], values: &[f64], lo: f64, hi: f64) -> f64 {
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let s = lo + (i as f64 + 0.5) * h;
            let k = times.iter().rposition(|&t| t <= s).unwrap();
            acc += values[k];
        }
        acc / n as f64
    }

    #[test]
    fn cumavg_hand_arithmetic() {
        let out = cumulative_average(&[0.0, 1.0, 2.0], &[2.0, 4.0, 6.0]).unwrap();
        assert_eq!(out, vec![2.0, 2.0, 3.0]);
    }

    #[test]
    fn cumavg_constant_series() {
        let out = cumulative_average(&[0.3, 1.1, 2.9, 3.0], &[1.7; 4]).unwrap();
        for v in out {
            assert!((v - 1.7).abs() < 1e-14);
        }
    }

    #[test]
    fn cumavg_affine_time_invariance() {
        let t = [0.2, 1.0, 2.5, 3.1];
        let v = [1.0, -2.0, 0.5, 4.0];
        let moved: Vec<f64> = t.iter().map(|x| 3.0 * x + 7.0).collect();
        let a = cumulative_average(&t, &v).unwrap();
        let b = cumulative_average(&moved, &v).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        assert_eq!(
            cumulative_average(&[0.0, 1.0], &[1.0]),
            Err(ExposureError::LengthMismatch {
                expected: 2,
                got: 1
            })
        );
        assert_eq!(
            cumulative_average(&[0.0, 1.0, 1.0], &[1.0; 3]),
            Err(ExposureError::NonMonotoneTimes(2))
        );
        assert!(matches!(
            moving_average(&[0.0], &[1.0], 0.0),
            Err(ExposureError::InvalidWindow(_))
        ));
    }

    #[test]
    fn movavg_single_point() {
        assert_eq!(
            moving_average(&[3.0], &[2.5], 1.0).unwrap(),
            vec![Some(2.5)]
        );
    }

    #[test]
    fn movavg_constant() {
        let out = moving_average(&[0.0, 0.5, 3.0, 3.2, 6.0], &[4.0; 5], 1.0).unwrap();
        for v in out.into_iter().flatten() {
            assert!((v - 4.0).abs() < 1e-14);
        }
    }

    #[test]
    fn movavg_unavailable_when_window_has_no_measurement() {
        let out = moving_average(&[0.0, 10.0], &[1.0, 2.0], 2.0).unwrap();
        assert_eq!(out, vec![Some(1.0), None]);
    }

    #[test]
    fn movavg_wide_window_matches_brute_force() {
        let t = [0.0, 0.7, 1.9, 2.4, 4.0];
        let v = [1.0, 3.0, -1.0, 2.0, 5.0];
        let out = moving_average(&t, &v, 100.0).unwrap();
        for j in 1..t.len() {
            let want = brute_window_average(&t, &v, t[0], t[j]);
            assert!((out[j].unwrap() - want).abs() < 1e-4, "j={j}");
        }
        let cum = cumulative_average(&t, &v).unwrap();
        assert!((out[4].unwrap() - cum[4]).abs() < 1e-12);
    }

    #[test]
    fn movavg_narrow_window_matches_brute_force() {
        let t = [0.0, 0.7, 1.9, 2.4, 4.0];
        let v = [1.0, 3.0, -1.0, 2.0, 5.0];
        let out = moving_average(&t, &v, 1.5).unwrap();
        for j in 1..t.len() {
            if let Some(got) = out[j] {
                let lo = (t[j] - 1.5).max(t[0]);
                let want = brute_window_average(&t, &v, lo, t[j]);
                assert!((got - want).abs() < 1e-4, "j={j}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn prediction_examples() {
        let alpha = [1.2, 0.6, 0.5, 0.4, 0.3];
        assert!((predict_true_exposure(&alpha, 1.0, 0.0, &[0.0]).unwrap() - 1.8).abs() < 1e-12);
        assert!((predict_true_exposure(&alpha, 2.0, 1.0, &[1.0]).unwrap() - 4.0).abs() < 1e-12);
        let identity = [0.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(
            predict_true_exposure(&identity, 3.3, 9.0, &[-2.0]).unwrap(),
            3.3
        );
        assert!(matches!(
            predict_true_exposure(&alpha, 1.0, 0.0, &[]),
            Err(ExposureError::LengthMismatch {
                expected: 4,
                got: 5
            })
        ));
    }

    #[test]
    fn functional_parsing() {
        assert_eq!(
            "cumavg".parse::<HistoryFunctional>().unwrap(),
            HistoryFunctional::CumulativeAverage
        );
        assert_eq!(
            "movavg:12".parse::<HistoryFunctional>().unwrap(),
            HistoryFunctional::MovingAverage { window: 12.0 }
        );
        assert!("movavg:-1".parse::<HistoryFunctional>().is_err());
        assert!("median".parse::<HistoryFunctional>().is_err());
    }

    fn series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..8).prop_flat_map(|m| {
            (
                prop::collection::vec(0.05f64..2.0, m),
                prop::collection::vec(-5.0f64..5.0, m),
                -3.0f64..3.0,
            )
                .prop_map(|(gaps, values, start)| {
                    let mut t = start;
                    let times = gaps
                        .iter()
                        .map(|g| {
                            t += g;
                            t
                        })
                        .collect();
                    (times, values)
                })
        })
    }

    proptest! {
        #[test]
        fn cumavg_affine_invariant((t, v) in series(), a in 0.1f64..10.0, b in -20.0f64..20.0) {
            let moved: Vec<f64> = t.iter().map(|x| a * x + b).collect();
            let x = cumulative_average(&t, &v).unwrap();
            let y = cumulative_average(&moved, &v).unwrap();
            for (p, q) in x.iter().zip(&y) {
                prop_assert!((p - q).abs() < 1e-9 * (1.0 + p.abs()));
            }
        }

        #[test]
        fn cumavg_is_localized((t, v) in series(), bump in -3.0f64..3.0) {
            let base = cumulative_average(&t, &v).unwrap();
            for k in 0..v.len() {
                let mut w = v.clone();
                w[k] += bump;
                let moved = cumulative_average(&t, &w).unwrap();
                for j in 0..v.len() {
                    let depends = if j == 0 { k == 0 } else { k < j };
                    if !depends {
                        prop_assert_eq!(base[j], moved[j]);
                    }
                }
            }
        }

        #[test]
        fn movavg_wide_window_equals_cumavg((t, v) in series()) {
            let span = t[t.len() - 1] - t[0];
            let mv = moving_average(&t, &v, span + 1e-6).unwrap();
            let cu = cumulative_average(&t, &v).unwrap();
            for (a, b) in mv.iter().zip(&cu) {
                prop_assert!((a.unwrap() - b).abs() < 1e-9);
            }
        }

        #[test]
        fn prediction_linear_in_alpha(
            a1 in prop::collection::vec(-3.0f64..3.0, 6),
            a2 in prop::collection::vec(-3.0f64..3.0, 6),
            c in -2.0f64..2.0, t in 0.0f64..5.0, w in prop::collection::vec(-2.0f64..2.0, 2),
        ) {
            let sum: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
            let lhs = predict_true_exposure(&sum, c, t, &w).unwrap();
            let rhs = predict_true_exposure(&a1, c, t, &w).unwrap() + predict_true_exposure(&a2, c, t, &w).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
