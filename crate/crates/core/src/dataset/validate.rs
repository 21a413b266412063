use serde::Serialize;

use super::{Design, Role, Study, SubjectPanel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    NonIncreasingTimes,
    LengthMismatch,
    ExposureAlignment,
    OutcomeInEvs,
    MissingOutcome,
    NonFiniteValue,
    NoUsablePoints,
}

impl ViolationKind {
    pub fn label(self) -> &'static str {
        match self {
            ViolationKind::NonIncreasingTimes => "non-increasing times",
            ViolationKind::LengthMismatch => "length mismatch",
            ViolationKind::ExposureAlignment => "exposure alignment",
            ViolationKind::OutcomeInEvs => "outcome in EVS",
            ViolationKind::MissingOutcome => "missing outcome",
            ViolationKind::NonFiniteValue => "non-finite value",
            ViolationKind::NoUsablePoints => "no usable points",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub role: Role,
    pub subject: String,
    pub kind: ViolationKind,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let role = match self.role {
            Role::Main => "main",
            Role::Validation => "validation",
        };
        write!(
            f,
            "{} [{role} `{}`]: {}",
            self.kind.label(),
            self.subject,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }
}

/// Structural checks on a study. Never fails; returns every violation found.
pub fn validate_study(study: &Study) -> ValidationReport {
    let mut out = Vec::new();
    let p = study.n_covariates();
    for panel in &study.main {
        check_panel(panel, Role::Main, p, &mut out);
        if panel.outcome.is_none() && !panel.is_empty() {
            push(
                &mut out,
                Role::Main,
                panel,
                ViolationKind::MissingOutcome,
                "main-study subject has no outcomes".into(),
            );
        }
    }
    for panel in &study.validation {
        check_panel(panel, Role::Validation, p, &mut out);
        match (study.design, panel.outcome.is_some()) {
            (Design::MsEvs, true) => push(
                &mut out,
                Role::Validation,
                panel,
                ViolationKind::OutcomeInEvs,
                "external validation subjects must not carry outcomes".into(),
            ),
            (Design::MsIvs, false) if !panel.is_empty() => push(
                &mut out,
                Role::Validation,
                panel,
                ViolationKind::MissingOutcome,
                "internal validation subject has no outcomes".into(),
            ),
            _ => {}
        }
    }
    ValidationReport { violations: out }
}

fn push(
    out: &mut Vec<Violation>,
    role: Role,
    panel: &SubjectPanel,
    kind: ViolationKind,
    detail: String,
) {
    out.push(Violation {
        role,
        subject: panel.id.clone(),
        kind,
        detail,
    });
}

fn check_panel(panel: &SubjectPanel, role: Role, p: usize, out: &mut Vec<Violation>) {
    let m = panel.len();
    if m == 0 {
        push(
            out,
            role,
            panel,
            ViolationKind::NoUsablePoints,
            "subject has zero time points".into(),
        );
        return;
    }
    let lengths_ok = panel.surrogate.len() == m
        && panel.true_exposure.len() == m
        && panel.covariates.nrows() == m
        && panel.covariates.ncols() == p
        && panel.outcome.as_ref().is_none_or(|y| y.len() == m);
    if !lengths_ok {
        push(
            out,
            role,
            panel,
            ViolationKind::LengthMismatch,
            format!(
                "{m} time points but vectors of differing length or {} covariates (expected {p})",
                panel.covariates.ncols()
            ),
        );
        return;
    }
    // negated so NaN fails the check
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if let Some(j) = (1..m).find(|&j| !(panel.times[j] > panel.times[j - 1])) {
        push(
            out,
            role,
            panel,
            ViolationKind::NonIncreasingTimes,
            format!(
                "time {} does not follow {}",
                panel.times[j],
                panel.times[j - 1]
            ),
        );
    }
    for j in 0..m {
        if panel.true_exposure[j].is_some() && !panel.surrogate[j].is_finite() {
            push(
                out,
                role,
                panel,
                ViolationKind::ExposureAlignment,
                format!("true exposure without surrogate at time {}", panel.times[j]),
            );
        }
    }
    let finite = panel.times.iter().all(|t| t.is_finite())
        && panel.covariates.iter().all(|w| w.is_finite())
        && panel.true_exposure.iter().flatten().all(|c| c.is_finite())
        && panel
            .outcome
            .as_ref()
            .is_none_or(|y| y.iter().all(|v| v.is_finite()))
        && panel
            .surrogate
            .iter()
            .zip(&panel.true_exposure)
            .all(|(s, c)| s.is_finite() || c.is_some());
    if !finite {
        push(
            out,
            role,
            panel,
            ViolationKind::NonFiniteValue,
            "missing or non-finite entries".into(),
        );
    }
}
