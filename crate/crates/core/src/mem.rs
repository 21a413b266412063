//! Measurement error model fits on validation data and assumption diagnostics.
//!
//! The model is linear: `c = α₀ + α₁C + α₂t + α₃C·t + Wᵀα₄ + ε`. With one
//! validation record per subject it is fitted by OLS; with repeated records
//! by an identity-link Gaussian GEE whose working correlation is re-estimated
//! by moments. Both return per-subject estimating-function contributions and
//! their derivative so that the outcome fit can stack them into one sandwich.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use thiserror::Error;

use crate::dataset::{Study, SubjectPanel};
use crate::exec::Execution;
use crate::exposure::{ExposureError, HistoryFunctional, MemDesign};
use crate::gee::{
    solve_gee, Cluster, CorrStructure, GeeError, GeeOptions, GeeSpec, LinkFunction,
    VarianceFunction, WorkingCorrelation,
};
use crate::numkit::{solve_linear_system, NumError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemError {
    #[error("measurement error design is rank deficient")]
    RankDeficientDesign,
    #[error("{n} validation records for {dim} coefficients")]
    TooFewSubjects { n: usize, dim: usize },
    #[error("validation subject `{0}` has more than one true-exposure record")]
    MultipleRecords(String),
    #[error("no validation subject has a true-exposure record")]
    NoValidationData,
    #[error("measurement error model did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("no validation record has a preceding surrogate measurement")]
    InsufficientLags,
    #[error("coefficient vector has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Exposure(#[from] ExposureError),
    #[error(transparent)]
    Gee(GeeError),
}

impl MemError {
    pub fn is_numerical(&self) -> bool {
        match self {
            MemError::RankDeficientDesign | MemError::NoConvergence(_) => true,
            MemError::Gee(e) => e.is_numerical(),
            _ => false,
        }
    }
}

impl From<GeeError> for MemError {
    fn from(e: GeeError) -> Self {
        match e {
            GeeError::RankDeficientDesign => MemError::RankDeficientDesign,
            other => MemError::Gee(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemMethod {
    Ols,
    Gee,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemFit {
    pub alpha: DVector<f64>,
    /// Pooled `RSS / (records − dim α)`.
    pub residual_variance: f64,
    /// `ψ_α` per validation panel, in input order; zero for panels without
    /// true-exposure records.
    pub scores: Vec<DVector<f64>>,
    /// `Σ ∂ψ_α/∂α`, negative definite.
    pub bread: DMatrix<f64>,
    pub labels: Vec<String>,
    pub design: MemDesign,
    pub method: MemMethod,
    pub corr: WorkingCorrelation,
    pub n_subjects: usize,
    pub n_records: usize,
}

impl MemFit {
    /// `ĉ = α̂ᵀ z(C, t, W)`.
    pub fn predict(&self, surrogate: f64, t: f64, w: &[f64]) -> f64 {
        self.design
            .row(surrogate, t, w)
            .iter()
            .zip(self.alpha.iter())
            .map(|(z, a)| z * a)
            .sum()
    }

    pub fn score_sum(&self) -> DVector<f64> {
        self.scores
            .iter()
            .fold(DVector::zeros(self.alpha.len()), |acc, s| acc + s)
    }
}

struct Records {
    /// Per panel: (design rows, true exposures, waves).
    panels: Vec<(DMatrix<f64>, Vec<f64>, Vec<usize>)>,
    dim: usize,
}

fn collect_records(validation: &[SubjectPanel], design: &MemDesign) -> Records {
    let dim = design.dim();
    let panels = validation
        .iter()
        .map(|panel| {
            let mut rows = Vec::new();
            let mut c = Vec::new();
            let mut waves = Vec::new();
            for j in 0..panel.len() {
                if let Some(cj) = panel.true_exposure[j] {
                    let w: Vec<f64> = panel.covariates.row(j).iter().copied().collect();
                    rows.extend(design.row(panel.surrogate[j], panel.times[j], &w));
                    c.push(cj);
                    waves.push(j);
                }
            }
            (DMatrix::from_row_slice(c.len(), dim, &rows), c, waves)
        })
        .collect();
    Records { panels, dim }
}

fn singular(e: NumError) -> MemError {
    match e {
        NumError::SingularMatrix { .. } => MemError::RankDeficientDesign,
        other => MemError::Gee(GeeError::Num(other)),
    }
}

/// Pooled least squares over all rows; returns (coefficients, RSS).
fn pooled_ls(z: &DMatrix<f64>, c: &DVector<f64>) -> Result<(DVector<f64>, f64), MemError> {
    let ztz = z.transpose() * z;
    let ztc = z.transpose() * c;
    let a = solve_linear_system(
        &ztz,
        &DMatrix::from_column_slice(ztc.len(), 1, ztc.as_slice()),
    )
    .map_err(singular)?;
    let a = a.column(0).into_owned();
    let rss = (c - z * &a).norm_squared();
    Ok((a, rss))
}

/// OLS fit of the measurement error model with one record per subject.
pub fn fit_mem_ols(
    validation: &[SubjectPanel],
    design: &MemDesign,
    covariate_names: &[String],
) -> Result<MemFit, MemError> {
    let rec = collect_records(validation, design);
    for (panel, (_, c, _)) in validation.iter().zip(&rec.panels) {
        if c.len() > 1 {
            return Err(MemError::MultipleRecords(panel.id.clone()));
        }
    }
    let n: usize = rec.panels.iter().map(|p| p.1.len()).sum();
    if n == 0 {
        return Err(MemError::NoValidationData);
    }
    if n <= rec.dim {
        return Err(MemError::TooFewSubjects { n, dim: rec.dim });
    }
    let (z, c) = stack(&rec);
    let (alpha, rss) = pooled_ls(&z, &c)?;
    let scores = rec
        .panels
        .iter()
        .map(|(zi, ci, _)| zi.transpose() * (DVector::from_column_slice(ci) - zi * &alpha))
        .collect();
    Ok(MemFit {
        residual_variance: rss / (n - rec.dim) as f64,
        scores,
        bread: -(z.transpose() * &z),
        labels: design.labels(covariate_names),
        design: design.clone(),
        method: MemMethod::Ols,
        corr: WorkingCorrelation::Independence,
        n_subjects: rec.panels.iter().filter(|p| !p.1.is_empty()).count(),
        n_records: n,
        alpha,
    })
}

fn stack(rec: &Records) -> (DMatrix<f64>, DVector<f64>) {
    let n: usize = rec.panels.iter().map(|p| p.1.len()).sum();
    let mut z = DMatrix::zeros(n, rec.dim);
    let mut c = DVector::zeros(n);
    let mut r = 0;
    for (zi, ci, _) in &rec.panels {
        for j in 0..ci.len() {
            z.row_mut(r).copy_from(&zi.row(j));
            c[r] = ci[j];
            r += 1;
        }
    }
    (z, c)
}

/// GEE fit of the measurement error model with repeated records per subject.
///
/// Falls back to [`fit_mem_ols`] when every subject has a single record, the
/// case in which the two estimators coincide.
pub fn fit_mem_gee(
    validation: &[SubjectPanel],
    design: &MemDesign,
    covariate_names: &[String],
    corr: CorrStructure,
) -> Result<MemFit, MemError> {
    let rec = collect_records(validation, design);
    if rec.panels.iter().all(|p| p.1.len() <= 1) {
        return fit_mem_ols(validation, design, covariate_names);
    }
    let n: usize = rec.panels.iter().map(|p| p.1.len()).sum();
    if n <= rec.dim {
        return Err(MemError::TooFewSubjects { n, dim: rec.dim });
    }
    let index: Vec<usize> = (0..rec.panels.len())
        .filter(|&i| !rec.panels[i].1.is_empty())
        .collect();
    let clusters: Vec<Cluster> = index
        .iter()
        .map(|&i| {
            let (z, c, w) = &rec.panels[i];
            Cluster::new(z.clone(), c.clone()).with_waves(w.clone())
        })
        .collect();
    let spec = GeeSpec::new(LinkFunction::Identity, VarianceFunction::Gaussian, corr);
    let opts = GeeOptions {
        exec: Execution::Sequential,
        ..GeeOptions::default()
    };
    let fit = solve_gee(&clusters, &spec, &opts)?;
    if !fit.converged {
        return Err(MemError::NoConvergence(fit.iterations));
    }
    // Undo the dispersion scaling so both fitting paths report ψ = Zᵀ R⁻¹ (c − Zα).
    let phi = fit.params.phi;
    let mut scores = vec![DVector::zeros(rec.dim); rec.panels.len()];
    for (k, &i) in index.iter().enumerate() {
        scores[i] = &fit.scores[k] * phi;
    }
    let (z, c) = stack(&rec);
    let rss = (c - z * &fit.beta).norm_squared();
    Ok(MemFit {
        alpha: fit.beta,
        residual_variance: rss / (n - rec.dim) as f64,
        scores,
        bread: fit.bread * phi,
        labels: design.labels(covariate_names),
        design: design.clone(),
        method: MemMethod::Gee,
        corr: fit.params.corr,
        n_subjects: index.len(),
        n_records: n,
    })
}

/// OLS for single-record validation data, GEE otherwise.
pub fn fit_mem(study: &Study, design: &MemDesign, corr: CorrStructure) -> Result<MemFit, MemError> {
    fit_mem_gee(&study.validation, design, &study.covariate_names, corr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub f_stat: f64,
    pub df1: usize,
    pub df2: usize,
    pub p_value: f64,
}

/// Nested-model F test for adding the mean of earlier surrogate values to
/// the measurement error model.
///
/// Uses validation records that have at least one earlier surrogate
/// measurement, pooled across subjects as if independent. Within-subject
/// correlation is ignored, so the test is approximate for repeated records.
pub fn localized_error_test(
    validation: &[SubjectPanel],
    design: &MemDesign,
) -> Result<TestResult, MemError> {
    let dim = design.dim();
    let mut rows = Vec::new();
    let mut c = Vec::new();
    for panel in validation {
        for j in 1..panel.len() {
            let Some(cj) = panel.true_exposure[j] else {
                continue;
            };
            let prior = &panel.surrogate[..j];
            if !panel.surrogate[j].is_finite() || prior.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let w: Vec<f64> = panel.covariates.row(j).iter().copied().collect();
            let mut row = design.row(panel.surrogate[j], panel.times[j], &w);
            row.push(prior.iter().sum::<f64>() / j as f64);
            rows.extend(row);
            c.push(cj);
        }
    }
    let n = c.len();
    if n == 0 {
        return Err(MemError::InsufficientLags);
    }
    if n <= dim + 1 {
        return Err(MemError::TooFewSubjects { n, dim: dim + 1 });
    }
    let full = DMatrix::from_row_slice(n, dim + 1, &rows);
    let c = DVector::from_vec(c);
    let (_, rss_full) = pooled_ls(&full, &c)?;
    let (_, rss_reduced) = pooled_ls(&full.columns(0, dim).into_owned(), &c)?;
    let df2 = n - dim - 1;
    let f_stat = ((rss_reduced - rss_full).max(0.0)) / (rss_full / df2 as f64);
    let p_value = if f_stat.is_finite() {
        let dist = FisherSnedecor::new(1.0, df2 as f64)
            .map_err(|_| MemError::TooFewSubjects { n, dim: dim + 1 })?;
        dist.sf(f_stat)
    } else {
        0.0
    };
    Ok(TestResult {
        f_stat,
        df1: 1,
        df2,
        p_value,
    })
}

/// `β′ Var(X | C̃, t̃, W̃) β` averaged over main-study points.
///
/// Calibration residuals are taken as independent across a subject's points
/// (the localized error assumption), so `Var(ĥⱼ) = σ² Σₖ wⱼₖ²` with `w` the
/// history weights. Only the exposure column and its time interaction carry
/// variance, giving `Var(ĥⱼ)(β₁ + β₃tⱼ)²` per point. `beta` is laid out as
/// `(intercept, h, t, h·t, W…)`.
pub fn approximation_diagnostic(
    residual_variance: f64,
    beta: &[f64],
    study: &Study,
    functional: HistoryFunctional,
) -> Result<f64, MemError> {
    if beta.len() < 4 {
        return Err(MemError::LengthMismatch {
            expected: 4 + study.n_covariates(),
            got: beta.len(),
        });
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for panel in &study.main {
        let hw = functional.weights(&panel.times)?;
        for j in 0..panel.len() {
            if !hw.available[j] {
                continue;
            }
            let w2: f64 = hw.matrix.row(j).iter().map(|w| w * w).sum();
            let slope = beta[1] + beta[3] * panel.times[j];
            sum += residual_variance * w2 * slope * slope;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Design;
    use crate::numkit::RngStream;

    const ALPHA: [f64; 5] = [1.2, 0.6, 0.5, 0.4, 0.3];

    fn names() -> Vec<String> {
        vec!["W1".into()]
    }

    /// Validation panels with five points; `keep` selects which carry `c`.
    fn panels(
        seed: u64,
        n: usize,
        noise: f64,
        keep: impl Fn(usize, usize) -> bool,
        lag: f64,
    ) -> Vec<SubjectPanel> {
        let mut rng = RngStream::new(seed, 0);
        (0..n)
            .map(|i| {
                let t0 = rng.uniform();
                let times: Vec<f64> = (0..5).map(|j| t0 + j as f64).collect();
                let cs: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
                let w = DMatrix::from_fn(5, 1, |_, _| rng.standard_normal());
                let truth = (0..5)
                    .map(|j| {
                        let mut c = predict(&ALPHA, cs[j], times[j], w[(j, 0)])
                            + noise * rng.standard_normal();
                        if j > 0 {
                            c += lag * cs[..j].iter().sum::<f64>() / j as f64;
                        }
                        keep(i, j).then_some(c)
                    })
                    .collect();
                SubjectPanel::new(format!("v{i}"), times, cs)
                    .with_true_exposure(truth)
                    .with_covariates(w)
            })
            .collect()
    }

    fn predict(a: &[f64], c: f64, t: f64, w: f64) -> f64 {
        a[0] + a[1] * c + a[2] * t + a[3] * c * t + a[4] * w
    }

    /// Normal equations solved by Gaussian elimination, independent of the
    /// library's linear algebra.
    fn normal_equations(rows: &[Vec<f64>], c: &[f64]) -> Vec<f64> {
        let d = rows[0].len();
        let mut a = vec![vec![0.0; d + 1]; d];
        for (r, y) in rows.iter().zip(c) {
            for i in 0..d {
                for j in 0..d {
                    a[i][j] += r[i] * r[j];
                }
                a[i][d] += r[i] * y;
            }
        }
        for col in 0..d {
            let piv = (col..d)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for r in col + 1..d {
                let f = a[r][col] / a[col][col];
                for k in col..=d {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            x[i] = (a[i][d] - (i + 1..d).map(|k| a[i][k] * x[k]).sum::<f64>()) / a[i][i];
        }
        x
    }

    fn records(ps: &[SubjectPanel]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let d = MemDesign::full(1);
        let mut rows = Vec::new();
        let mut c = Vec::new();
        for p in ps {
            for j in 0..p.len() {
                if let Some(cj) = p.true_exposure[j] {
                    rows.push(d.row(p.surrogate[j], p.times[j], &[p.covariates[(j, 0)]]));
                    c.push(cj);
                }
            }
        }
        (rows, c)
    }

    #[test]
    fn noiseless_identity_calibration() {
        let mut ps = panels(1, 40, 0.0, |_, j| j == 2, 0.0);
        for p in &mut ps {
            p.true_exposure[2] = Some(p.surrogate[2]);
        }
        let fit = fit_mem_ols(&ps, &MemDesign::full(1), &names()).unwrap();
        let expect = [0.0, 1.0, 0.0, 0.0, 0.0];
        for k in 0..5 {
            assert!((fit.alpha[k] - expect[k]).abs() < 1e-10);
        }
        assert!(fit.residual_variance < 1e-20);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let mut ps = panels(2, 40, 0.5, |_, j| j == 1, 0.0);
        for p in &mut ps {
            for j in 0..5 {
                p.covariates[(j, 0)] = p.surrogate[j];
            }
        }
        assert_eq!(
            fit_mem_ols(&ps, &MemDesign::full(1), &names()).unwrap_err(),
            MemError::RankDeficientDesign
        );
    }

    #[test]
    fn too_few_subjects() {
        let ps = panels(2, 5, 0.5, |_, j| j == 1, 0.0);
        assert!(matches!(
            fit_mem_ols(&ps, &MemDesign::full(1), &names()),
            Err(MemError::TooFewSubjects { n: 5, dim: 5 })
        ));
    }

    #[test]
    fn ols_matches_normal_equations() {
        let ps = panels(3, 50, 0.6, |i, j| j == i % 5, 0.0);
        let fit = fit_mem_ols(&ps, &MemDesign::full(1), &names()).unwrap();
        let (rows, c) = records(&ps);
        let oracle = normal_equations(&rows, &c);
        for k in 0..5 {
            assert!((fit.alpha[k] - oracle[k]).abs() < 1e-8);
        }
        assert!(fit.score_sum().amax() < 1e-8);
        assert!(fit
            .bread
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .all(|&l| l < 0.0));
    }

    #[test]
    fn gee_reduces_to_ols_for_single_records() {
        let ps = panels(4, 60, 0.6, |i, j| j == (i * 7) % 5, 0.0);
        let a = fit_mem_ols(&ps, &MemDesign::full(1), &names()).unwrap();
        let b = fit_mem_gee(&ps, &MemDesign::full(1), &names(), CorrStructure::Ar1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn independence_gee_is_pooled_least_squares() {
        let ps = panels(5, 60, 0.6, |i, j| j <= i % 5, 0.0);
        let fit = fit_mem_gee(
            &ps,
            &MemDesign::full(1),
            &names(),
            CorrStructure::Independence,
        )
        .unwrap();
        let (rows, c) = records(&ps);
        let oracle = normal_equations(&rows, &c);
        for k in 0..5 {
            assert!((fit.alpha[k] - oracle[k]).abs() < 1e-8, "{k}");
        }
        assert!(fit.score_sum().amax() < 1e-8);
    }

    #[test]
    fn ar1_gee_recovers_truth_on_average() {
        let reps = 500;
        let mut mean = [0.0; 5];
        let mut sq = [0.0; 5];
        for r in 0..reps {
            let ps = panels(100 + r, 40, 0.6, |_, _| true, 0.0);
            let fit = fit_mem_gee(&ps, &MemDesign::full(1), &names(), CorrStructure::Ar1).unwrap();
            for k in 0..5 {
                mean[k] += fit.alpha[k] / reps as f64;
                sq[k] += fit.alpha[k] * fit.alpha[k] / reps as f64;
            }
        }
        for k in 0..5 {
            let se = ((sq[k] - mean[k] * mean[k]) / reps as f64).sqrt();
            assert!(
                (mean[k] - ALPHA[k]).abs() < 4.0 * se,
                "alpha{k}: {} vs {}",
                mean[k],
                ALPHA[k]
            );
        }
    }

    #[test]
    fn affine_surrogate_rescaling_keeps_predictions() {
        let ps = panels(6, 80, 0.4, |_, j| j % 2 == 0, 0.0);
        let fit = fit_mem_gee(
            &ps,
            &MemDesign::full(1),
            &names(),
            CorrStructure::Exchangeable,
        )
        .unwrap();
        let (a, b) = (2.5, -1.0);
        let scaled: Vec<SubjectPanel> = ps
            .iter()
            .map(|p| SubjectPanel {
                surrogate: p.surrogate.iter().map(|c| a * c + b).collect(),
                ..p.clone()
            })
            .collect();
        let fit2 = fit_mem_gee(
            &scaled,
            &MemDesign::full(1),
            &names(),
            CorrStructure::Exchangeable,
        )
        .unwrap();
        assert!((fit2.alpha[1] - fit.alpha[1] / a).abs() < 1e-8);
        for (p, q) in ps.iter().zip(&scaled) {
            for j in 0..5 {
                let w = [p.covariates[(j, 0)]];
                let d = fit.predict(p.surrogate[j], p.times[j], &w)
                    - fit2.predict(q.surrogate[j], q.times[j], &w);
                assert!(d.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn localized_test_size() {
        let reps = 1000;
        let rejections = (0..reps)
            .filter(|&r| {
                let ps = panels(10_000 + r, 30, 0.5, |_, _| true, 0.0);
                localized_error_test(&ps, &MemDesign::full(1))
                    .unwrap()
                    .p_value
                    < 0.05
            })
            .count();
        let rate = rejections as f64 / reps as f64;
        assert!((rate - 0.05).abs() <= 0.02, "size {rate}");
    }

    #[test]
    fn localized_test_power() {
        let reps = 200;
        let hits = (0..reps)
            .filter(|&r| {
                let ps = panels(20_000 + r, 30, 0.1, |_, _| true, 1.0);
                localized_error_test(&ps, &MemDesign::full(1))
                    .unwrap()
                    .p_value
                    < 0.01
            })
            .count();
        assert!(hits as f64 >= 0.99 * reps as f64, "{hits}");
    }

    #[test]
    fn localized_test_needs_lags() {
        let ps = panels(7, 30, 0.5, |_, _| true, 0.0);
        let single: Vec<SubjectPanel> = ps
            .iter()
            .map(|p| {
                SubjectPanel::new(p.id.clone(), vec![p.times[0]], vec![p.surrogate[0]])
                    .with_true_exposure(vec![p.true_exposure[0]])
                    .with_covariates(p.covariates.rows(0, 1).into_owned())
            })
            .collect();
        assert_eq!(
            localized_error_test(&single, &MemDesign::full(1)).unwrap_err(),
            MemError::InsufficientLags
        );
    }

    #[test]
    fn diagnostic_zero_cases_and_formula() {
        let main = vec![SubjectPanel::new("m", vec![0.0, 1.0, 3.0], vec![0.0; 3])
            .with_covariates(DMatrix::zeros(3, 1))];
        let study = Study::new(Design::MsEvs, main, vec![]);
        let f = HistoryFunctional::CumulativeAverage;
        assert_eq!(
            approximation_diagnostic(0.0, &[-3.0, 0.2, 0.5, -0.1, 0.1], &study, f).unwrap(),
            0.0
        );
        assert_eq!(
            approximation_diagnostic(0.35, &[-3.0, 0.0, 0.5, 0.0, 0.1], &study, f).unwrap(),
            0.0
        );
        // weights: (1), (1), (1/3, 2/3) → Σw² = 1, 1, 5/9
        let b1 = 0.2;
        let v = approximation_diagnostic(2.0, &[0.0, b1, 0.0, 0.0, 0.0], &study, f).unwrap();
        assert!((v - 2.0 * b1 * b1 * (1.0 + 1.0 + 5.0 / 9.0) / 3.0).abs() < 1e-14);
        assert!(matches!(
            approximation_diagnostic(1.0, &[0.0, 1.0], &study, f),
            Err(MemError::LengthMismatch { .. })
        ));
    }
}
