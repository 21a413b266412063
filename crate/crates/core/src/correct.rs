//! The two-step corrected estimator and its stacked sandwich variance.
//!
//! Step one fits the measurement error model on validation data. Step two
//! predicts the true exposure at every outcome point, runs the history
//! functional over the predictions and fits the outcome GEE on
//! `(1, ĥ, t, ĥ·t, W)`. The joint parameter `θ = (α, β)` solves the stacked
//! equations `(ψ_α, ψ_β)`, whose sandwich `B⁻¹AB⁻ᵀ` carries the calibration
//! uncertainty into `Var(β̂)`.
//!
//! `ψ_α` does not involve β, so `B_αβ = 0`. The block `B_βα` is closed form:
//! ĥ is linear in α (`∂ĥⱼ/∂α = gⱼ = Σₖ Hⱼₖ zₖ`, with `H` the history weights
//! and `zₖ` the calibration design row), and the design row depends on ĥ
//! through the exposure column and its time interaction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{validate_study, Design, Study, SubjectPanel};
use crate::exposure::{ExposureError, HistoryFunctional, MemDesign};
use crate::gee::{
    all_terms, solve_gee, Cluster, CorrStructure, GeeError, GeeFit, GeeOptions, GeeSpec,
    LinkFunction,
};
use crate::mem::{approximation_diagnostic, fit_mem, MemError, MemFit};
use crate::numkit::{inverse, symmetrize, NumError};
use crate::Z_95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrectError {
    #[error("variant {variant} requires an internal validation design, got {design}")]
    DesignMismatch { variant: String, design: String },
    #[error("study failed validation:\n{}", .0.join("\n"))]
    InvalidStudy(Vec<String>),
    #[error("stacked bread matrix is singular")]
    SingularBread,
    #[error("covariance matrix is singular")]
    SingularVariance,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no outcome points left to fit")]
    NoOutcomeData,
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Gee(#[from] GeeError),
    #[error(transparent)]
    Exposure(#[from] ExposureError),
}

impl CorrectError {
    pub fn is_numerical(&self) -> bool {
        match self {
            CorrectError::SingularBread | CorrectError::SingularVariance => true,
            CorrectError::Mem(e) => e.is_numerical(),
            CorrectError::Gee(e) => e.is_numerical(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Predicted exposure at every outcome point.
    #[serde(rename = "predicted")]
    PredictedAll,
    /// True exposure at internal validation points where measured.
    #[serde(rename = "true-ivs")]
    TrueInIvs,
    /// Inverse-variance-weighted average of the main-study corrected fit and
    /// the validation-only fit on true exposure.
    #[serde(rename = "ivw")]
    InverseVarianceWeighted,
    /// Surrogate exposure, no correction.
    #[serde(rename = "uncorrected")]
    Uncorrected,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::PredictedAll,
        Variant::TrueInIvs,
        Variant::InverseVarianceWeighted,
        Variant::Uncorrected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PredictedAll => "predicted",
            Variant::TrueInIvs => "true-ivs",
            Variant::InverseVarianceWeighted => "ivw",
            Variant::Uncorrected => "uncorrected",
        }
    }

    pub fn needs_internal_validation(self) -> bool {
        matches!(self, Variant::TrueInIvs | Variant::InverseVarianceWeighted)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                format!("unknown variant `{s}` (expected predicted, true-ivs, ivw or uncorrected)")
            })
    }
}

/// Everything a corrected fit needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub functional: HistoryFunctional,
    pub link: LinkFunction,
    pub mem_design: MemDesign,
    pub mem_corr: CorrStructure,
    pub outcome_corr: CorrStructure,
    pub gee: GeeOptions,
}

impl FitConfig {
    /// Cumulative average, logit link, full calibration design, AR(1) everywhere.
    pub fn new(n_covariates: usize) -> Self {
        Self {
            functional: HistoryFunctional::CumulativeAverage,
            link: LinkFunction::Logit,
            mem_design: MemDesign::full(n_covariates),
            mem_corr: CorrStructure::Ar1,
            outcome_corr: CorrStructure::Ar1,
            gee: GeeOptions::default(),
        }
    }

    fn spec(&self) -> GeeSpec {
        GeeSpec::canonical(self.link, self.outcome_corr)
    }
}

/// Blocks of the stacked sandwich, `θ = (α, β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichParts {
    /// `Σᵢ ∂ψᵢ/∂θ`, block lower-triangular.
    pub bread: DMatrix<f64>,
    /// `Σᵢ ψᵢψᵢᵀ`
    pub meat: DMatrix<f64>,
    pub n_alpha: usize,
}

/// `B⁻¹ A B⁻ᵀ`
pub fn sandwich_variance(parts: &SandwichParts) -> Result<DMatrix<f64>, CorrectError> {
    let b_inv = inverse(&parts.bread).map_err(|e| match e {
        NumError::SingularMatrix { .. } => CorrectError::SingularBread,
        other => CorrectError::Gee(GeeError::Num(other)),
    })?;
    Ok(symmetrize(&(&b_inv * &parts.meat * b_inv.transpose())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `β′Var(X|·)β` averaged over main-study points.
    pub approximation: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedFit {
    pub variant: Variant,
    pub beta: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub labels: Vec<String>,
    pub mem: Option<MemFit>,
    /// The outcome GEE behind `beta` (the main-study fit for IVW).
    pub outcome: Option<GeeFit>,
    pub sandwich: Option<SandwichParts>,
    pub diagnostics: Diagnostics,
}

impl CorrectedFit {
    pub fn se(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// 95% Wald intervals.
    pub fn wald_ci(&self) -> Vec<(f64, f64)> {
        let se = self.se();
        self.beta
            .iter()
            .zip(se.iter())
            .map(|(b, s)| (b - Z_95 * s, b + Z_95 * s))
            .collect()
    }

    /// `cᵀβ̂` with its standard error.
    pub fn linear_combination(&self, c: &[f64]) -> Result<(f64, f64), CorrectError> {
        if c.len() != self.beta.len() {
            return Err(CorrectError::DimensionMismatch(format!(
                "{} weights for {} coefficients",
                c.len(),
                self.beta.len()
            )));
        }
        let c = DVector::from_column_slice(c);
        let est = c.dot(&self.beta);
        let var = (c.transpose() * &self.cov * &c)[(0, 0)];
        Ok((est, var.max(0.0).sqrt()))
    }

    /// Odds ratio per unit exposure at time `t_ref`, `exp(β₁ + β₃t_ref)`, with
    /// a delta-method standard error.
    pub fn odds_ratio_at(&self, t_ref: f64) -> Result<(f64, f64), CorrectError> {
        let mut c = vec![0.0; self.beta.len()];
        if c.len() < 4 {
            return Err(CorrectError::DimensionMismatch(
                "outcome design lacks the interaction column".into(),
            ));
        }
        c[1] = 1.0;
        c[3] = t_ref;
        let (est, se) = self.linear_combination(&c)?;
        let or = est.exp();
        Ok((or, or * se))
    }
}

/// Column names of the outcome design.
pub fn outcome_labels(covariate_names: &[String]) -> Vec<String> {
    let mut l: Vec<String> = ["intercept", "exposure", "time", "exposure:time"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    l.extend(covariate_names.iter().cloned());
    l
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Surrogate,
    Predicted,
    /// Predicted, with measured true exposure substituted where available.
    Mixed,
}

/// One outcome subject's design, with `∂ĥ/∂α` rows when exposure is predicted.
struct OutcomeUnit {
    cluster: Cluster,
    /// Per retained point, `∂ĥⱼ/∂α`.
    grad: Option<DMatrix<f64>>,
    /// Index into `study.validation`, if this subject is a validation subject.
    validation: Option<usize>,
}

/// Outcome cluster plus `∂ĥ/∂α` rows when exposure is predicted.
type UnitParts = (Cluster, Option<DMatrix<f64>>);

fn build_unit(
    panel: &SubjectPanel,
    functional: HistoryFunctional,
    source: Source,
    mem: Option<&MemFit>,
) -> Result<Option<UnitParts>, CorrectError> {
    let m = panel.len();
    let Some(y) = panel.outcome.as_ref() else {
        return Ok(None);
    };
    let hw = functional.weights(&panel.times)?;
    let w_row = |j: usize| -> Vec<f64> { panel.covariates.row(j).iter().copied().collect() };
    let (values, z): (Vec<f64>, Option<DMatrix<f64>>) = match (source, mem) {
        (Source::Surrogate, _) => (panel.surrogate.clone(), None),
        (_, Some(mem)) => {
            let d = mem.alpha.len();
            let mut z = DMatrix::zeros(m, d);
            let mut v = vec![0.0; m];
            for j in 0..m {
                match panel.true_exposure[j] {
                    Some(c) if source == Source::Mixed => v[j] = c,
                    _ => {
                        let row = mem
                            .design
                            .row(panel.surrogate[j], panel.times[j], &w_row(j));
                        v[j] = mem.predict(panel.surrogate[j], panel.times[j], &w_row(j));
                        z.row_mut(j).copy_from_slice(&row);
                    }
                }
            }
            (v, Some(z))
        }
        _ => unreachable!("predicted exposure without a calibration fit"),
    };
    let h = hw.apply(&values);
    let keep: Vec<usize> = (0..m).filter(|&j| h[j].is_some()).collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let p = 4 + panel.n_covariates();
    let x = DMatrix::from_fn(keep.len(), p, |r, col| {
        let j = keep[r];
        let hj = h[j].unwrap();
        match col {
            0 => 1.0,
            1 => hj,
            2 => panel.times[j],
            3 => hj * panel.times[j],
            k => panel.covariates[(j, k - 4)],
        }
    });
    let grad = z.map(|z| {
        let g = &hw.matrix * z;
        g.select_rows(&keep)
    });
    let cluster = Cluster::new(x, keep.iter().map(|&j| y[j]).collect()).with_waves(keep);
    Ok(Some((cluster, grad)))
}

fn outcome_units(
    study: &Study,
    config: &FitConfig,
    source: Source,
    mem: Option<&MemFit>,
    include_validation: bool,
) -> Result<Vec<OutcomeUnit>, CorrectError> {
    let mut units = Vec::new();
    for panel in &study.main {
        if let Some((cluster, grad)) = build_unit(panel, config.functional, source, mem)? {
            units.push(OutcomeUnit {
                cluster,
                grad,
                validation: None,
            });
        }
    }
    if include_validation && study.design == Design::MsIvs {
        for (k, panel) in study.validation.iter().enumerate() {
            if let Some((cluster, grad)) = build_unit(panel, config.functional, source, mem)? {
                units.push(OutcomeUnit {
                    cluster,
                    grad,
                    validation: Some(k),
                });
            }
        }
    }
    if units.is_empty() {
        return Err(CorrectError::NoOutcomeData);
    }
    Ok(units)
}

fn check_study(study: &Study) -> Result<(), CorrectError> {
    let report = validate_study(study);
    if report.is_empty() {
        Ok(())
    } else {
        Err(CorrectError::InvalidStudy(
            report.violations.iter().map(|v| v.to_string()).collect(),
        ))
    }
}

fn diagnostics(fit: &GeeFit, approximation: Option<f64>) -> Diagnostics {
    Diagnostics {
        approximation,
        converged: fit.converged,
        iterations: fit.iterations,
    }
}

/// Outcome fit plus stacked sandwich for predicted (or mixed) exposure.
fn stacked_fit(
    study: &Study,
    config: &FitConfig,
    mem: &MemFit,
    source: Source,
    include_validation: bool,
) -> Result<(GeeFit, SandwichParts, DMatrix<f64>), CorrectError> {
    let units = outcome_units(study, config, source, Some(mem), include_validation)?;
    let clusters: Vec<Cluster> = units.iter().map(|u| u.cluster.clone()).collect();
    let spec = config.spec();
    let fit = solve_gee(&clusters, &spec, &config.gee)?;
    let terms = all_terms(&clusters, &fit.beta, &spec, &fit.params, config.gee.exec)?;

    let (da, p) = (mem.alpha.len(), fit.beta.len());
    let (b1, b3) = (fit.beta[1], fit.beta[3]);
    let blocks = config
        .gee
        .exec
        .map(&units.iter().zip(&terms).collect::<Vec<_>>(), |(u, t)| {
            let g = u
                .grad
                .as_ref()
                .expect("predicted exposure carries gradients");
            let x = &u.cluster.x;
            let mut block = DMatrix::zeros(p, da);
            let mut g_tilde = g.clone();
            for j in 0..g.nrows() {
                let tj = x[(j, 2)];
                // the exposure column and its time interaction
                for c in 0..da {
                    block[(1, c)] += t.q[j] * g[(j, c)];
                    block[(3, c)] += t.q[j] * tj * g[(j, c)];
                }
                g_tilde.row_mut(j).scale_mut(b1 + b3 * tj);
            }
            block + x.transpose() * &t.dq * g_tilde
        });
    let b_beta_alpha = blocks.iter().fold(DMatrix::zeros(p, da), |acc, b| acc + b);

    let n = da + p;
    let mut bread = DMatrix::zeros(n, n);
    bread.view_mut((0, 0), (da, da)).copy_from(&mem.bread);
    bread.view_mut((da, 0), (p, da)).copy_from(&b_beta_alpha);
    bread.view_mut((da, da), (p, p)).copy_from(&fit.bread);

    // One stacked contribution per subject: validation subjects carry ψ_α,
    // outcome subjects ψ_β, internal validation subjects both.
    let outer = |psi: &DVector<f64>, meat: &mut DMatrix<f64>| *meat += psi * psi.transpose();
    let mut meat = DMatrix::zeros(n, n);
    let mut beta_score_of = vec![None; study.validation.len()];
    for (u, s) in units.iter().zip(&fit.scores) {
        match u.validation {
            Some(k) => beta_score_of[k] = Some(s),
            None => {
                let mut psi = DVector::zeros(n);
                psi.rows_mut(da, p).copy_from(s);
                outer(&psi, &mut meat);
            }
        }
    }
    for (k, sa) in mem.scores.iter().enumerate() {
        let mut psi = DVector::zeros(n);
        psi.rows_mut(0, da).copy_from(sa);
        if let Some(sb) = beta_score_of[k] {
            psi.rows_mut(da, p).copy_from(sb);
        }
        outer(&psi, &mut meat);
    }
    let parts = SandwichParts {
        bread,
        meat,
        n_alpha: da,
    };
    let cov = sandwich_variance(&parts)?;
    let cov_beta = cov.view((da, da), (p, p)).into_owned();
    Ok((fit, parts, cov_beta))
}

fn require_ivs(study: &Study, variant: Variant) -> Result<(), CorrectError> {
    if variant.needs_internal_validation() && study.design != Design::MsIvs {
        return Err(CorrectError::DesignMismatch {
            variant: variant.name().into(),
            design: study.design.label().into(),
        });
    }
    Ok(())
}

/// Two-step corrected fit for the requested variant.
pub fn fit_corrected(
    study: &Study,
    config: &FitConfig,
    variant: Variant,
) -> Result<CorrectedFit, CorrectError> {
    check_study(study)?;
    require_ivs(study, variant)?;
    if variant == Variant::Uncorrected {
        return fit_uncorrected(study, config);
    }
    let mem = fit_mem(study, &config.mem_design, config.mem_corr)?;
    let labels = outcome_labels(&study.covariate_names);
    match variant {
        Variant::PredictedAll | Variant::TrueInIvs => {
            let source = if variant == Variant::TrueInIvs {
                Source::Mixed
            } else {
                Source::Predicted
            };
            let (fit, parts, cov) = stacked_fit(study, config, &mem, source, true)?;
            let approx = approximation_diagnostic(
                mem.residual_variance,
                fit.beta.as_slice(),
                study,
                config.functional,
            )?;
            Ok(CorrectedFit {
                variant,
                beta: fit.beta.clone(),
                cov,
                labels,
                diagnostics: diagnostics(&fit, Some(approx)),
                mem: Some(mem),
                outcome: Some(fit),
                sandwich: Some(parts),
            })
        }
        Variant::InverseVarianceWeighted => {
            let (fit, parts, cov) = stacked_fit(study, config, &mem, Source::Predicted, false)?;
            let approx = approximation_diagnostic(
                mem.residual_variance,
                fit.beta.as_slice(),
                study,
                config.functional,
            )?;
            let main = CorrectedFit {
                variant: Variant::PredictedAll,
                beta: fit.beta.clone(),
                cov,
                labels,
                diagnostics: diagnostics(&fit, Some(approx)),
                mem: Some(mem),
                outcome: Some(fit),
                sandwich: Some(parts),
            };
            let ivs = fit_ivs_true(study, config)?;
            ivw_combine(&main, &ivs)
        }
        Variant::Uncorrected => unreachable!(),
    }
}

/// Outcome GEE on the surrogate history, with robust standard errors.
pub fn fit_uncorrected(study: &Study, config: &FitConfig) -> Result<CorrectedFit, CorrectError> {
    check_study(study)?;
    uncorrected_fit(study, config, true)
}

/// As [`fit_uncorrected`], restricted to main-study subjects.
pub fn fit_uncorrected_main_only(
    study: &Study,
    config: &FitConfig,
) -> Result<CorrectedFit, CorrectError> {
    check_study(study)?;
    uncorrected_fit(study, config, false)
}

fn uncorrected_fit(
    study: &Study,
    config: &FitConfig,
    include_validation: bool,
) -> Result<CorrectedFit, CorrectError> {
    let units = outcome_units(study, config, Source::Surrogate, None, include_validation)?;
    let clusters: Vec<Cluster> = units.into_iter().map(|u| u.cluster).collect();
    let fit = solve_gee(&clusters, &config.spec(), &config.gee)?;
    Ok(CorrectedFit {
        variant: Variant::Uncorrected,
        beta: fit.beta.clone(),
        cov: fit.cov_robust.clone(),
        labels: outcome_labels(&study.covariate_names),
        diagnostics: diagnostics(&fit, None),
        mem: None,
        outcome: Some(fit),
        sandwich: None,
    })
}

/// Standard logistic regression (working independence) on internal
/// validation subjects using measured true exposure.
///
/// A subject whose true exposure is measured at every point gets the exact
/// history. Otherwise each measured point becomes its own record with the
/// measurement standing in for the history, which for a single measurement
/// per subject is a cross-sectional regression.
pub fn fit_ivs_true(study: &Study, config: &FitConfig) -> Result<GeeFit, CorrectError> {
    require_ivs(study, Variant::InverseVarianceWeighted)?;
    let mut clusters = Vec::new();
    for panel in &study.validation {
        let Some(y) = panel.outcome.as_ref() else {
            continue;
        };
        let m = panel.len();
        let p = 4 + panel.n_covariates();
        if panel.n_true() == m {
            let c: Vec<f64> = panel.true_exposure.iter().map(|c| c.unwrap()).collect();
            let full = SubjectPanel {
                surrogate: c,
                ..panel.clone()
            };
            if let Some((cluster, _)) =
                build_unit(&full, config.functional, Source::Surrogate, None)?
            {
                clusters.push(cluster);
            }
        } else {
            let keep: Vec<usize> = (0..m)
                .filter(|&j| panel.true_exposure[j].is_some())
                .collect();
            if keep.is_empty() {
                continue;
            }
            let x = DMatrix::from_fn(keep.len(), p, |r, col| {
                let j = keep[r];
                let c = panel.true_exposure[j].unwrap();
                match col {
                    0 => 1.0,
                    1 => c,
                    2 => panel.times[j],
                    3 => c * panel.times[j],
                    k => panel.covariates[(j, k - 4)],
                }
            });
            clusters.push(Cluster::new(x, keep.iter().map(|&j| y[j]).collect()).with_waves(keep));
        }
    }
    if clusters.is_empty() {
        return Err(CorrectError::NoOutcomeData);
    }
    let spec = GeeSpec::canonical(config.link, CorrStructure::Independence);
    Ok(solve_gee(&clusters, &spec, &config.gee)?)
}

/// `(V_M⁻¹ + V_I⁻¹)⁻¹ (V_M⁻¹β̂_M + V_I⁻¹β̂_I)` with covariance `(V_M⁻¹ + V_I⁻¹)⁻¹`.
pub fn ivw_combine(main: &CorrectedFit, ivs: &GeeFit) -> Result<CorrectedFit, CorrectError> {
    let (beta, cov) = ivw(&main.beta, &main.cov, &ivs.beta, &ivs.cov_model)?;
    Ok(CorrectedFit {
        variant: Variant::InverseVarianceWeighted,
        beta,
        cov,
        labels: main.labels.clone(),
        mem: main.mem.clone(),
        outcome: main.outcome.clone(),
        sandwich: main.sandwich.clone(),
        diagnostics: Diagnostics {
            converged: main.diagnostics.converged && ivs.converged,
            ..main.diagnostics.clone()
        },
    })
}

/// Inverse-variance weighting of two estimates of the same vector.
pub fn ivw(
    beta_m: &DVector<f64>,
    v_m: &DMatrix<f64>,
    beta_i: &DVector<f64>,
    v_i: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), CorrectError> {
    let p = beta_m.len();
    if beta_i.len() != p || v_m.shape() != (p, p) || v_i.shape() != (p, p) {
        return Err(CorrectError::DimensionMismatch(format!(
            "estimates of length {p} and {} with covariances {:?} and {:?}",
            beta_i.len(),
            v_m.shape(),
            v_i.shape()
        )));
    }
    // Each coefficient is weighted by its own variance; the two estimates
    // are independent, so the combined covariance is D_M V_M D_M + D_I V_I D_I.
    let mut d_m = DVector::zeros(p);
    let mut d_i = DVector::zeros(p);
    for k in 0..p {
        let (vm, vi) = (v_m[(k, k)], v_i[(k, k)]);
        if !(vm > 0.0 && vi > 0.0 && vm.is_finite() && vi.is_finite()) {
            return Err(CorrectError::SingularVariance);
        }
        d_m[k] = vi / (vm + vi);
        d_i[k] = vm / (vm + vi);
    }
    let beta = d_m.component_mul(beta_m) + d_i.component_mul(beta_i);
    let (dm, di) = (DMatrix::from_diagonal(&d_m), DMatrix::from_diagonal(&d_i));
    let cov = symmetrize(&(&dm * v_m * &dm + &di * v_i * &di));
    Ok((beta, cov))
}
