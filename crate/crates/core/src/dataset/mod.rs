//! Longitudinal data model for main-study / validation-study designs.
//!
//! A [`Study`] holds main-study panels (surrogate exposure and outcome) and
//! validation panels (surrogate plus true exposure, with outcomes only in an
//! internal validation study). Panels are immutable once built; downstream
//! estimators only accept studies whose [`validate_study`] report is empty.

mod csvio;
mod validate;

pub use csvio::{load_long_csv, read_long_csv, write_long_csv, CsvSchema};
pub use validate::{validate_study, ValidationReport, Violation, ViolationKind};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing required column `{0}`")]
    Schema(String),
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("subject `{id}` has more than one record at time {time}")]
    DuplicateTime { id: String, time: f64 },
    #[error("cannot read `{path}`: {message}")]
    Io { path: String, message: String },
    #[error("inconsistent panel `{id}`: {message}")]
    Inconsistent { id: String, message: String },
}

/// Main study plus internal or external validation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Design {
    #[serde(rename = "ivs")]
    MsIvs,
    #[serde(rename = "evs")]
    MsEvs,
}

impl Design {
    pub fn label(self) -> &'static str {
        match self {
            Design::MsIvs => "MS/IVS",
            Design::MsEvs => "MS/EVS",
        }
    }
}

impl std::str::FromStr for Design {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ivs" | "ms_ivs" | "internal" => Ok(Design::MsIvs),
            "evs" | "ms_evs" | "external" => Ok(Design::MsEvs),
            other => Err(format!("unknown design `{other}` (expected ivs or evs)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Main,
    Validation,
}

/// One subject's ordered time points.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPanel {
    pub id: String,
    pub times: Vec<f64>,
    /// Binary or continuous outcome; absent for external validation subjects.
    pub outcome: Option<Vec<f64>>,
    /// Surrogate (error-prone) exposure `C`.
    pub surrogate: Vec<f64>,
    /// True exposure `c`; `None` where it was not measured.
    pub true_exposure: Vec<Option<f64>>,
    /// Error-free covariates, one row per time point.
    pub covariates: DMatrix<f64>,
}

impl SubjectPanel {
    /// Panel without true exposure or outcome, with zero covariates.
    pub fn new(id: impl Into<String>, times: Vec<f64>, surrogate: Vec<f64>) -> Self {
        let m = times.len();
        Self {
            id: id.into(),
            times,
            outcome: None,
            surrogate,
            true_exposure: vec![None; m],
            covariates: DMatrix::zeros(m, 0),
        }
    }

    pub fn with_outcome(mut self, y: Vec<f64>) -> Self {
        self.outcome = Some(y);
        self
    }

    pub fn with_true_exposure(mut self, c: Vec<Option<f64>>) -> Self {
        self.true_exposure = c;
        self
    }

    pub fn with_covariates(mut self, w: DMatrix<f64>) -> Self {
        self.covariates = w;
        self
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of points with a measured true exposure (`vᵢ`).
    pub fn n_true(&self) -> usize {
        self.true_exposure.iter().filter(|c| c.is_some()).count()
    }

    pub fn availability_mask(&self) -> Vec<bool> {
        self.true_exposure.iter().map(Option::is_some).collect()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub design: Design,
    pub main: Vec<SubjectPanel>,
    pub validation: Vec<SubjectPanel>,
    pub covariate_names: Vec<String>,
}

impl Study {
    pub fn new(design: Design, main: Vec<SubjectPanel>, validation: Vec<SubjectPanel>) -> Self {
        let p = main
            .iter()
            .chain(validation.iter())
            .map(SubjectPanel::n_covariates)
            .next()
            .unwrap_or(0);
        Self {
            design,
            main,
            validation,
            covariate_names: (1..=p).map(|k| format!("W{k}")).collect(),
        }
    }

    pub fn n_main(&self) -> usize {
        self.main.len()
    }

    pub fn n_validation(&self) -> usize {
        self.validation.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Panels that enter the outcome model: main only for MS/EVS, main and
    /// validation for MS/IVS.
    pub fn outcome_panels(&self) -> impl Iterator<Item = (Role, &SubjectPanel)> {
        let validation: &[SubjectPanel] = match self.design {
            Design::MsIvs => &self.validation,
            Design::MsEvs => &[],
        };
        self.main
            .iter()
            .map(|p| (Role::Main, p))
            .chain(validation.iter().map(|p| (Role::Validation, p)))
    }

    /// Resolves covariate names to column indices.
    pub fn covariate_indices(&self, names: &[String]) -> Result<Vec<usize>, DatasetError> {
        names
            .iter()
            .map(|n| {
                self.covariate_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| DatasetError::Schema(n.clone()))
            })
            .collect()
    }
}
