use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::GeeError;

/// Working-correlation family requested by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrStructure {
    Independence,
    Exchangeable,
    #[default]
    Ar1,
    Unstructured,
}

impl std::str::FromStr for CorrStructure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "independence" | "ind" => Ok(CorrStructure::Independence),
            "exchangeable" | "exch" => Ok(CorrStructure::Exchangeable),
            "ar1" => Ok(CorrStructure::Ar1),
            "unstructured" | "un" => Ok(CorrStructure::Unstructured),
            other => Err(format!("unknown working correlation `{other}`")),
        }
    }
}

/// A working correlation with its parameters filled in.
///
/// Correlations are indexed by wave (the position of a point in the planned
/// schedule), so subjects with skipped visits get the right submatrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WorkingCorrelation {
    Independence,
    Exchangeable { rho: f64 },
    Ar1 { rho: f64 },
    Unstructured { matrix: Vec<Vec<f64>> },
}

pub(crate) const RHO_BOUND: f64 = 0.99;

impl WorkingCorrelation {
    pub fn structure(&self) -> CorrStructure {
        match self {
            WorkingCorrelation::Independence => CorrStructure::Independence,
            WorkingCorrelation::Exchangeable { .. } => CorrStructure::Exchangeable,
            WorkingCorrelation::Ar1 { .. } => CorrStructure::Ar1,
            WorkingCorrelation::Unstructured { .. } => CorrStructure::Unstructured,
        }
    }

    /// Scalar parameter, if the structure has one.
    pub fn rho(&self) -> Option<f64> {
        match *self {
            WorkingCorrelation::Exchangeable { rho } | WorkingCorrelation::Ar1 { rho } => Some(rho),
            _ => None,
        }
    }

    pub fn correlation(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 1.0;
        }
        match self {
            WorkingCorrelation::Independence => 0.0,
            WorkingCorrelation::Exchangeable { rho } => *rho,
            WorkingCorrelation::Ar1 { rho } => rho.powi(a.abs_diff(b) as i32),
            WorkingCorrelation::Unstructured { matrix } => matrix
                .get(a)
                .and_then(|row| row.get(b))
                .copied()
                .unwrap_or(0.0),
        }
    }

    /// `R` restricted to the given waves.
    pub fn matrix(&self, waves: &[usize]) -> DMatrix<f64> {
        let m = waves.len();
        DMatrix::from_fn(m, m, |j, k| self.correlation(waves[j], waves[k]))
    }

    /// `R⁻¹` for the given waves.
    pub fn inverse(&self, waves: &[usize]) -> Result<DMatrix<f64>, GeeError> {
        if matches!(self, WorkingCorrelation::Independence) || waves.len() == 1 {
            return Ok(DMatrix::identity(waves.len(), waves.len()));
        }
        self.matrix(waves)
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(GeeError::CorrelationNotPd)
    }
}

/// Pearson residuals of one subject with the wave of each point.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub values: Vec<f64>,
    pub waves: Vec<usize>,
}

impl Residuals {
    pub fn new(values: Vec<f64>, waves: Vec<usize>) -> Self {
        Self { values, waves }
    }

    /// Residuals observed at waves `0, 1, …, m−1`.
    pub fn consecutive(values: Vec<f64>) -> Self {
        let waves = (0..values.len()).collect();
        Self { values, waves }
    }
}

/// Moment estimator of the working-correlation parameters.
///
/// Pair products are averaged and divided by the pooled mean square, so the
/// residuals need not be scaled by the dispersion beforehand. AR(1) uses pairs
/// one wave apart, exchangeable uses all pairs and unstructured averages each
/// wave pair separately (pairs never observed together get 0). Estimates are
/// clipped to `[−0.99, 0.99]`.
pub fn estimate_rho(
    residuals: &[Residuals],
    structure: CorrStructure,
) -> Result<WorkingCorrelation, GeeError> {
    if structure == CorrStructure::Independence {
        return Ok(WorkingCorrelation::Independence);
    }
    let (mut ss, mut n) = (0.0, 0usize);
    for r in residuals {
        ss += r.values.iter().map(|e| e * e).sum::<f64>();
        n += r.values.len();
    }
    let scale = if n > 0 { ss / n as f64 } else { 0.0 };
    let ratio = |sum: f64, count: usize| {
        if scale > 0.0 {
            (sum / count as f64 / scale).clamp(-RHO_BOUND, RHO_BOUND)
        } else {
            0.0
        }
    };

    match structure {
        CorrStructure::Independence => unreachable!(),
        CorrStructure::Ar1 | CorrStructure::Exchangeable => {
            let lag_one = structure == CorrStructure::Ar1;
            let (mut sum, mut count, mut m_max) = (0.0, 0usize, 1usize);
            for r in residuals {
                m_max = m_max.max(r.values.len());
                for j in 0..r.values.len() {
                    for k in j + 1..r.values.len() {
                        if !lag_one || r.waves[j].abs_diff(r.waves[k]) == 1 {
                            sum += r.values[j] * r.values[k];
                            count += 1;
                        }
                    }
                }
            }
            if count == 0 {
                return Err(GeeError::InsufficientPairs);
            }
            let rho = ratio(sum, count);
            Ok(if lag_one {
                WorkingCorrelation::Ar1 { rho }
            } else {
                // keep R positive definite for the largest cluster
                let floor = if m_max > 1 {
                    -1.0 / (m_max as f64 - 1.0) + 1e-3
                } else {
                    -RHO_BOUND
                };
                WorkingCorrelation::Exchangeable {
                    rho: rho.max(floor),
                }
            })
        }
        CorrStructure::Unstructured => {
            let k = residuals
                .iter()
                .flat_map(|r| r.waves.iter())
                .max()
                .map_or(0, |w| w + 1);
            let mut sum = DMatrix::<f64>::zeros(k, k);
            let mut count = DMatrix::<usize>::zeros(k, k);
            for r in residuals {
                for j in 0..r.values.len() {
                    for l in j + 1..r.values.len() {
                        let (a, b) = (r.waves[j].min(r.waves[l]), r.waves[j].max(r.waves[l]));
                        sum[(a, b)] += r.values[j] * r.values[l];
                        count[(a, b)] += 1;
                    }
                }
            }
            if count.iter().all(|&c| c == 0) {
                return Err(GeeError::InsufficientPairs);
            }
            let mut r = DMatrix::<f64>::identity(k, k);
            for a in 0..k {
                for b in a + 1..k {
                    if count[(a, b)] > 0 {
                        let v = ratio(sum[(a, b)], count[(a, b)]);
                        r[(a, b)] = v;
                        r[(b, a)] = v;
                    }
                }
            }
            // Pairwise estimates need not form a positive-definite matrix;
            // shrink the off-diagonal part until they do.
            let identity = DMatrix::<f64>::identity(k, k);
            let mut shrink = 1.0;
            while (&identity + (&r - &identity) * shrink).cholesky().is_none() {
                shrink *= 0.9;
            }
            if shrink < 1.0 {
                log::warn!("unstructured working correlation shrunk by {shrink:.3} to stay positive definite");
            }
            let r = &identity + (&r - &identity) * shrink;
            Ok(WorkingCorrelation::Unstructured {
                matrix: (0..k)
                    .map(|a| (0..k).map(|b| r[(a, b)]).collect())
                    .collect(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;

    #[test]
    fn matrices_are_symmetric_unit_diagonal_pd() {
        for wc in [
            WorkingCorrelation::Ar1 { rho: 0.7 },
            WorkingCorrelation::Ar1 { rho: -0.9 },
            WorkingCorrelation::Exchangeable { rho: 0.5 },
            WorkingCorrelation::Exchangeable { rho: -0.2 },
        ] {
            let r = wc.matrix(&[0, 1, 2, 3, 4]);
            assert_eq!(r, r.transpose());
            assert!(r.diagonal().iter().all(|&d| d == 1.0));
            assert!(r.clone().cholesky().is_some(), "{wc:?}");
            let inv = wc.inverse(&[0, 1, 2, 3, 4]).unwrap();
            assert!((r * inv - DMatrix::<f64>::identity(5, 5)).amax() < 1e-12);
        }
    }

    #[test]
    fn ar1_uses_wave_distance() {
        let r = WorkingCorrelation::Ar1 { rho: 0.5 }.matrix(&[0, 2, 3]);
        assert_eq!(r[(0, 1)], 0.25);
        assert_eq!(r[(1, 2)], 0.5);
        assert_eq!(r[(0, 2)], 0.125);
    }

    #[test]
    fn equal_residuals_clip_to_bound() {
        let res: Vec<Residuals> = (0..10)
            .map(|i| Residuals::consecutive(vec![i as f64 - 4.5; 3]))
            .collect();
        assert_eq!(
            estimate_rho(&res, CorrStructure::Exchangeable).unwrap(),
            WorkingCorrelation::Exchangeable { rho: RHO_BOUND }
        );
    }

    #[test]
    fn independent_residuals_give_zero() {
        let mut rng = RngStream::new(11, 0);
        let res: Vec<Residuals> = (0..10_000)
            .map(|_| Residuals::consecutive((0..5).map(|_| rng.standard_normal()).collect()))
            .collect();
        for s in [CorrStructure::Ar1, CorrStructure::Exchangeable] {
            let rho = estimate_rho(&res, s).unwrap().rho().unwrap();
            assert!(rho.abs() < 0.02, "{s:?} {rho}");
        }
        let WorkingCorrelation::Unstructured { matrix } =
            estimate_rho(&res, CorrStructure::Unstructured).unwrap()
        else {
            panic!()
        };
        assert!(matrix.iter().flatten().all(|v| *v == 1.0 || v.abs() < 0.05));
    }

    #[test]
    fn single_points_have_no_pairs() {
        let res = vec![
            Residuals::consecutive(vec![0.3]),
            Residuals::consecutive(vec![-1.0]),
        ];
        for s in [
            CorrStructure::Ar1,
            CorrStructure::Exchangeable,
            CorrStructure::Unstructured,
        ] {
            assert!(matches!(
                estimate_rho(&res, s),
                Err(GeeError::InsufficientPairs)
            ));
        }
    }

    #[test]
    fn recovers_ar1_correlation() {
        let mut rng = RngStream::new(5, 1);
        let rho = 0.6_f64;
        let res: Vec<Residuals> = (0..20_000)
            .map(|_| {
                let mut v = vec![rng.standard_normal()];
                for _ in 1..5 {
                    let prev = *v.last().unwrap();
                    v.push(rho * prev + (1.0 - rho * rho).sqrt() * rng.standard_normal());
                }
                Residuals::consecutive(v)
            })
            .collect();
        let est = estimate_rho(&res, CorrStructure::Ar1)
            .unwrap()
            .rho()
            .unwrap();
        assert!((est - rho).abs() < 0.02, "{est}");
    }
}
