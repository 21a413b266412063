use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Generator, MemSpec, Scenario, SimError};
use crate::correct::{fit_corrected, CorrectedFit, FitConfig, Variant};
use crate::exec::Execution;
use crate::exposure::{HistoryFunctional, MemDesign};
use crate::gee::{GeeOptions, LinkFunction};
use crate::Z_95;

/// One estimator's result on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub approximation: Option<f64>,
}

/// Per-estimator results of one replicate, in scenario estimator order;
/// `None` marks a failed or non-converged fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: u64,
    pub estimates: Vec<Option<Estimate>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMetrics {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    /// `(mean − truth)/truth`; absent when the truth is zero.
    pub rbias: Option<f64>,
    /// Mean model-based (sandwich) standard error.
    pub ase: f64,
    /// Empirical standard deviation of the estimates; needs two replicates.
    pub ese: Option<f64>,
    /// Coverage of the 95% Wald interval.
    pub cp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub estimator: Variant,
    pub coefficients: Vec<CoefficientMetrics>,
    pub used: usize,
    pub failures: usize,
    pub mean_approximation: Option<f64>,
}

impl MetricsReport {
    pub fn coefficient(&self, name: &str) -> Option<&CoefficientMetrics> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: Scenario,
    pub reports: Vec<MetricsReport>,
}

/// Relative bias, ASE, ESE and coverage per coefficient.
pub fn metrics(
    names: &[String],
    estimates: &[Vec<f64>],
    ses: &[Vec<f64>],
    truth: &[f64],
) -> Result<Vec<CoefficientMetrics>, SimError> {
    if estimates.len() != ses.len() {
        return Err(SimError::LengthMismatch(estimates.len(), ses.len()));
    }
    if estimates.is_empty() {
        return Err(SimError::Config("no estimates to summarize".into()));
    }
    let p = truth.len();
    if names.len() != p {
        return Err(SimError::LengthMismatch(names.len(), p));
    }
    if let Some(bad) = estimates.iter().chain(ses).find(|v| v.len() != p) {
        return Err(SimError::LengthMismatch(bad.len(), p));
    }
    let n = estimates.len() as f64;
    Ok((0..p)
        .map(|k| {
            let mean = estimates.iter().map(|e| e[k]).sum::<f64>() / n;
            let ase = ses.iter().map(|s| s[k]).sum::<f64>() / n;
            let ese = (estimates.len() > 1).then(|| {
                (estimates.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            });
            let covered = estimates
                .iter()
                .zip(ses)
                .filter(|(e, s)| (e[k] - truth[k]).abs() <= Z_95 * s[k])
                .count();
            CoefficientMetrics {
                name: names[k].clone(),
                truth: truth[k],
                mean,
                rbias: (truth[k] != 0.0).then(|| (mean - truth[k]) / truth[k]),
                ase,
                ese,
                cp: covered as f64 / n,
            }
        })
        .collect())
}

/// Fit settings used for every replicate.
pub fn fit_config(scenario: &Scenario) -> FitConfig {
    FitConfig {
        functional: HistoryFunctional::CumulativeAverage,
        link: LinkFunction::Logit,
        mem_design: match scenario.mem_spec {
            MemSpec::Full => MemDesign::full(1),
            MemSpec::NoInteraction => MemDesign::without_interaction(1),
        },
        mem_corr: scenario.mem_corr,
        outcome_corr: scenario.outcome_corr,
        // Replicates already run in parallel.
        gee: GeeOptions {
            exec: Execution::Sequential,
            ..GeeOptions::default()
        },
    }
}

fn usable(fit: CorrectedFit) -> Option<Estimate> {
    let se: Vec<f64> = fit.se().iter().copied().collect();
    let ok = fit.diagnostics.converged
        && fit.beta.iter().chain(&se).all(|v| v.is_finite())
        && se.iter().all(|s| *s > 0.0);
    ok.then(|| Estimate {
        beta: fit.beta.iter().copied().collect(),
        se,
        approximation: fit.diagnostics.approximation,
    })
}

/// Simulates and fits one replicate.
pub fn run_replicate(
    gen: &Generator,
    config: &FitConfig,
    replicate: u64,
) -> Result<ReplicateOutcome, SimError> {
    let study = gen.study(replicate)?;
    let estimates = gen
        .scenario()
        .estimators
        .iter()
        .map(|v| match fit_corrected(&study, config, *v) {
            Ok(fit) => usable(fit),
            Err(err) if err.is_numerical() => {
                log::debug!("replicate {replicate}, {v}: {err}");
                None
            }
            Err(err) => {
                log::warn!("replicate {replicate}, {v}: {err}");
                None
            }
        })
        .collect();
    Ok(ReplicateOutcome {
        replicate,
        estimates,
    })
}

/// Every replicate of the scenario, in replicate order. Each replicate draws
/// from its own `(base_seed, replicate)` stream and fits sequentially, so the
/// result is identical for any execution mode or thread count.
pub fn simulate_replicates(
    scenario: &Scenario,
    exec: Execution,
) -> Result<Vec<ReplicateOutcome>, SimError> {
    let gen = Generator::new(scenario)?;
    let config = fit_config(scenario);
    exec.map_range(scenario.replicates, |r| {
        run_replicate(&gen, &config, r as u64)
    })
    .into_iter()
    .collect()
}

/// Aggregates replicate outcomes per estimator.
pub fn summarize(
    scenario: &Scenario,
    outcomes: &[ReplicateOutcome],
) -> Result<SimulationReport, SimError> {
    let names = crate::correct::outcome_labels(&["W1".to_string()]);
    let reports = scenario
        .estimators
        .iter()
        .enumerate()
        .map(|(e, variant)| {
            let ok: Vec<&Estimate> = outcomes
                .iter()
                .filter_map(|o| o.estimates.get(e)?.as_ref())
                .collect();
            if ok.is_empty() {
                return Err(SimError::AllReplicatesFailed(variant.to_string()));
            }
            let betas: Vec<Vec<f64>> = ok.iter().map(|x| x.beta.clone()).collect();
            let ses: Vec<Vec<f64>> = ok.iter().map(|x| x.se.clone()).collect();
            let approx: Vec<f64> = ok.iter().filter_map(|x| x.approximation).collect();
            Ok(MetricsReport {
                estimator: *variant,
                coefficients: metrics(&names, &betas, &ses, &scenario.beta)?,
                used: ok.len(),
                failures: outcomes.len() - ok.len(),
                mean_approximation: (!approx.is_empty())
                    .then(|| approx.iter().sum::<f64>() / approx.len() as f64),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SimulationReport {
        scenario: scenario.clone(),
        reports,
    })
}

pub fn run_replicates(scenario: &Scenario, exec: Execution) -> Result<SimulationReport, SimError> {
    summarize(scenario, &simulate_replicates(scenario, exec)?)
}

fn display_name(v: Variant) -> &'static str {
    match v {
        Variant::Uncorrected => "Uncorrected",
        Variant::PredictedAll => "Proposed",
        Variant::TrueInIvs => "Proposed-True",
        Variant::InverseVarianceWeighted => "Proposed-Inv",
    }
}

impl SimulationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn report(&self, estimator: Variant) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.estimator == estimator)
    }

    /// Plain-text table: one row per coefficient, one column group
    /// (RBias, ASE, ESE, CP) per estimator.
    pub fn table(&self) -> String {
        let s = &self.scenario;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{}: {} n1={} n2={} Cor(c,C)={:.2} replicates={} seed={}",
            s.name,
            s.design.label(),
            s.n1,
            s.n2,
            s.target_cor,
            s.replicates,
            s.base_seed
        );
        const GROUP: usize = 32;
        let _ = write!(out, "{:<15}{:>9}", "", "");
        for r in &self.reports {
            let _ = write!(out, "  {:^GROUP$}", display_name(r.estimator));
        }
        out.push('\n');
        let _ = write!(out, "{:<15}{:>9}", "coefficient", "truth");
        for _ in &self.reports {
            let _ = write!(out, "  {:>9}{:>8}{:>8}{:>7}", "RBias", "ASE", "ESE", "CP");
        }
        out.push('\n');
        let names: Vec<&str> = self
            .reports
            .first()
            .map(|r| r.coefficients.iter().map(|c| c.name.as_str()).collect())
            .unwrap_or_default();
        for (k, name) in names.iter().enumerate() {
            let _ = write!(
                out,
                "{:<15}{:>9.4}",
                name, self.reports[0].coefficients[k].truth
            );
            for r in &self.reports {
                let c = &r.coefficients[k];
                let rb = c.rbias.map_or("-".into(), |v| format!("{:.2}%", 100.0 * v));
                let ese = c.ese.map_or("-".into(), |v| format!("{v:.3}"));
                let _ = write!(out, "  {:>9}{:>8.3}{:>8}{:>7.2}", rb, c.ase, ese, c.cp);
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<24}", "fits used/failed");
        for r in &self.reports {
            let _ = write!(out, "  {:^GROUP$}", format!("{}/{}", r.used, r.failures));
        }
        out.push('\n');
        out
    }
}
