//! Simulation study: data-generating process, replicate harness and metrics.
//!
//! Each subject is observed at five visits `t_{i1} + j − 1` with
//! `t_{i1} ~ U(0,1)`. Surrogate exposure and a covariate come from a joint
//! normal with AR(1) blocks, the true exposure from the linear measurement
//! error model plus noise, and binary outcomes from a logistic marginal
//! model on the true cumulative average with AR(1)-correlated responses
//! (latent Gaussian copula). Replicates run in parallel on isolated random
//! streams and are aggregated in replicate order, so reports do not depend
//! on the thread count.

mod dgp;
mod harness;
mod presets;

pub use dgp::{
    gen_binary_outcomes, gen_panel, latent_pair_correlation, Generator, LatentPair, LatentSubject,
};
pub use harness::{
    fit_config, metrics, run_replicate, run_replicates, simulate_replicates, summarize,
    CoefficientMetrics, Estimate, MetricsReport, ReplicateOutcome, SimulationReport,
};
pub use presets::{approximation_factor, misspecified_mem_scenario, stress_scenario};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correct::{CorrectError, Variant};
use crate::dataset::Design;
use crate::gee::CorrStructure;
use crate::numkit::NumError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("target correlation {target} is unreachable at t = {time:.3} (maximum {max:.4})")]
    InfeasibleCorrelation { target: f64, time: f64, max: f64 },
    #[error("every replicate failed for estimator {0}")]
    AllReplicatesFailed(String),
    #[error("estimates and standard errors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Correct(#[from] CorrectError),
}

impl SimError {
    pub fn is_numerical(&self) -> bool {
        match self {
            SimError::Config(_) | SimError::LengthMismatch(..) => false,
            SimError::Correct(e) => e.is_numerical(),
            _ => true,
        }
    }
}

/// Which validation points carry the true exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationMeasurements {
    /// One visit per subject, chosen as the rank of the first element of a
    /// uniform random vector.
    Single,
    /// Every visit.
    All,
}

/// Columns of the measurement error model fitted to the simulated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemSpec {
    Full,
    /// Omits the surrogate-by-time column.
    NoInteraction,
}

/// How the variance of the calibration noise `ε` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseModel {
    /// One variance for every point: the per-point value that makes
    /// `Cor(c, C)` hit the target, averaged over the time window of the
    /// given visit (0-based).
    CalibratedVisit {
        visit: usize,
    },
    /// A separate variance at each point so that every `Cor(c, C)` hits the
    /// target.
    PerPoint,
    Fixed {
        variance: f64,
    },
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::CalibratedVisit { visit: 1 }
    }
}

/// Joint covariance of the surrogate and covariate series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureCov {
    /// AR(1) coefficient of the surrogate series (unit variance).
    pub rho_c: f64,
    /// AR(1) coefficient of the covariate series (unit variance).
    pub rho_w: f64,
    /// Same-visit surrogate/covariate covariance; other visits are uncorrelated.
    pub cross: f64,
}

impl Default for ExposureCov {
    fn default() -> Self {
        Self {
            rho_c: 0.6,
            rho_w: 0.2,
            cross: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub n1: usize,
    pub n2: usize,
    pub replicates: usize,
    pub base_seed: u64,
    pub design: Design,
    pub validation_measurements: ValidationMeasurements,
    pub n_times: usize,
    /// `(α₀, α₁, α₂, α₃, α₄)` of `c = α₀ + α₁C + α₂t + α₃C·t + α₄W + ε`.
    pub alpha: Vec<f64>,
    /// `(β₀, β₁, β₂, β₃, β₄)` of `logit P(Y=1) = β₀ + β₁s + β₂t + β₃s·t + β₄W`.
    pub beta: Vec<f64>,
    pub target_cor: f64,
    pub noise: NoiseModel,
    pub exposure_cov: ExposureCov,
    /// Lag-one correlation of the binary outcomes (AR(1) across visits).
    pub outcome_lag_corr: f64,
    pub mem_spec: MemSpec,
    pub mem_corr: CorrStructure,
    pub outcome_corr: CorrStructure,
    pub estimators: Vec<Variant>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario::preset(Design::MsEvs, 2000, 200, 0.90, false)
    }
}

impl Scenario {
    /// The simulation grid: `strong` selects `β₃ = −log 1.5` (about 5%
    /// prevalence), otherwise `β₃ = −log 1.1` (about 15%).
    pub fn preset(design: Design, n1: usize, n2: usize, target_cor: f64, strong: bool) -> Self {
        let beta = if strong {
            vec![-3.0, 1.2_f64.ln(), 0.5, -(1.5_f64.ln()), 1.1_f64.ln()]
        } else {
            vec![-3.0, 1.2_f64.ln(), 0.5, -(1.1_f64.ln()), 1.2_f64.ln()]
        };
        let estimators = match design {
            Design::MsEvs => vec![Variant::Uncorrected, Variant::PredictedAll],
            Design::MsIvs => Variant::ALL.to_vec(),
        };
        Self {
            name: format!(
                "{}_n{n1}_v{n2}_cor{:.0}_b3log{}",
                match design {
                    Design::MsEvs => "evs",
                    Design::MsIvs => "ivs",
                },
                target_cor * 100.0,
                if strong { "15" } else { "11" }
            ),
            n1,
            n2,
            replicates: 500,
            base_seed: 20240501,
            design,
            validation_measurements: ValidationMeasurements::Single,
            n_times: 5,
            alpha: vec![1.2, 0.6, 0.5, 0.4, 0.3],
            beta,
            target_cor,
            noise: NoiseModel::default(),
            exposure_cov: ExposureCov::default(),
            outcome_lag_corr: 0.1,
            mem_spec: MemSpec::Full,
            mem_corr: CorrStructure::Ar1,
            outcome_corr: CorrStructure::Ar1,
            estimators,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError::Config(m));
        if self.alpha.len() != 5 || self.beta.len() != 5 {
            return fail(format!(
                "alpha and beta need 5 entries, got {} and {}",
                self.alpha.len(),
                self.beta.len()
            ));
        }
        if !(self.target_cor > 0.0 && self.target_cor < 1.0) {
            return fail(format!(
                "target_cor must lie in (0, 1), got {}",
                self.target_cor
            ));
        }
        if self.replicates == 0 || self.n1 == 0 || self.n_times == 0 {
            return fail("replicates, n1 and n_times must be positive".into());
        }
        if !(self.outcome_lag_corr > -1.0 && self.outcome_lag_corr < 1.0) {
            return fail(format!(
                "outcome_lag_corr must lie in (−1, 1), got {}",
                self.outcome_lag_corr
            ));
        }
        if let NoiseModel::Fixed { variance } = self.noise {
            if !(variance >= 0.0 && variance.is_finite()) {
                return fail(format!(
                    "noise variance must be non-negative, got {variance}"
                ));
            }
        }
        if let NoiseModel::CalibratedVisit { visit } = self.noise {
            if visit >= self.n_times {
                return fail(format!(
                    "calibration visit {visit} beyond {} visits",
                    self.n_times
                ));
            }
        }
        if self.estimators.is_empty() {
            return fail("no estimators requested".into());
        }
        if let Some(v) = self
            .estimators
            .iter()
            .find(|v| v.needs_internal_validation() && self.design == Design::MsEvs)
        {
            return fail(format!("estimator {v} needs an internal validation design"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}
