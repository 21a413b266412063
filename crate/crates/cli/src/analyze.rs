use std::fmt::Write as _;

use anyhow::anyhow;
use lmec_core::correct::{fit_corrected, CorrectedFit, FitConfig, Variant};
use lmec_core::dataset::{load_long_csv, validate_study, CsvSchema, Design, Study};
use lmec_core::exec::with_threads;
use lmec_core::exposure::MemDesign;
use lmec_core::gee::GeeOptions;
use lmec_core::mem::localized_error_test;
use serde_json::{json, Value};

use crate::{write_output, CmdResult, DataArgs, DiagnoseArgs, Failure, FitArgs};

/// Approximation diagnostic values below this are considered safe.
pub const APPROXIMATION_THRESHOLD: f64 = 0.4;

fn load(args: &DataArgs, design: Design) -> Result<Study, Failure> {
    let study = load_long_csv(&args.data, &CsvSchema::new(design)).map_err(Failure::classify)?;
    let report = validate_study(&study);
    if !report.is_empty() {
        let listing: Vec<String> = report.violations.iter().map(|v| format!("  {v}")).collect();
        return Err(Failure::user(anyhow!(
            "{} failed validation:\n{}",
            args.data.display(),
            listing.join("\n")
        )));
    }
    Ok(study)
}

fn config(args: &DataArgs, study: &Study) -> FitConfig {
    FitConfig {
        functional: args.functional,
        link: args.link,
        mem_design: MemDesign::full(study.n_covariates()),
        mem_corr: args.mem_corr,
        outcome_corr: args.outcome_corr,
        gee: GeeOptions::default(),
    }
}

fn fit_json(fit: &CorrectedFit, tref: Option<f64>) -> Result<Value, Failure> {
    let se = fit.se();
    let coefficients: Vec<Value> = fit
        .labels
        .iter()
        .zip(fit.wald_ci())
        .enumerate()
        .map(|(k, (name, (lo, hi)))| {
            json!({"name": name, "estimate": fit.beta[k], "se": se[k], "ci_lower": lo, "ci_upper": hi})
        })
        .collect();
    let odds_ratio = match tref {
        Some(t) => {
            let (or, or_se) = fit.odds_ratio_at(t).map_err(Failure::classify)?;
            let (log_or, log_se) = fit
                .linear_combination(&odds_ratio_weights(fit.beta.len(), t))
                .map_err(Failure::classify)?;
            json!({
                "t_ref": t,
                "odds_ratio": or,
                "se": or_se,
                "ci_lower": (log_or - lmec_core::Z_95 * log_se).exp(),
                "ci_upper": (log_or + lmec_core::Z_95 * log_se).exp(),
            })
        }
        None => Value::Null,
    };
    let mem = fit.mem.as_ref().map(|m| {
        json!({
            "labels": m.labels,
            "alpha": m.alpha.as_slice(),
            "residual_variance": m.residual_variance,
            "subjects": m.n_subjects,
            "records": m.n_records,
        })
    });
    Ok(json!({
        "variant": fit.variant,
        "coefficients": coefficients,
        "odds_ratio": odds_ratio,
        "measurement_error_model": mem,
        "diagnostics": fit.diagnostics,
    }))
}

fn odds_ratio_weights(p: usize, t: f64) -> Vec<f64> {
    let mut c = vec![0.0; p];
    c[1] = 1.0;
    c[3] = t;
    c
}

fn fit_table(fits: &[CorrectedFit], tref: Option<f64>) -> String {
    let mut out = String::new();
    for fit in fits {
        let _ = writeln!(out, "{}", fit.variant);
        let _ = writeln!(
            out,
            "  {:<16}{:>11}{:>10}{:>11}{:>11}",
            "coefficient", "estimate", "se", "95% lo", "95% hi"
        );
        let se = fit.se();
        for (k, (lo, hi)) in fit.wald_ci().into_iter().enumerate() {
            let _ = writeln!(
                out,
                "  {:<16}{:>11.5}{:>10.5}{:>11.5}{:>11.5}",
                fit.labels[k], fit.beta[k], se[k], lo, hi
            );
        }
        if let Some((t, Ok((or, or_se)))) = tref.map(|t| (t, fit.odds_ratio_at(t))) {
            let _ = writeln!(out, "  odds ratio at t = {t}: {or:.4} (se {or_se:.4})");
        }
        if let Some(a) = fit.diagnostics.approximation {
            let _ = writeln!(out, "  approximation diagnostic: {a:.4}");
        }
        out.push('\n');
    }
    out
}

pub fn fit(args: &FitArgs) -> CmdResult {
    let study = load(&args.data, args.design)?;
    let config = config(&args.data, &study);
    let mut variants: Vec<Variant> = Vec::new();
    for v in args.variant.iter().copied().chain([Variant::Uncorrected]) {
        if !variants.contains(&v) {
            variants.push(v);
        }
    }
    let fits = with_threads(args.data.threads, || {
        variants
            .iter()
            .map(|v| fit_corrected(&study, &config, *v))
            .collect::<Result<Vec<_>, _>>()
    })
    .map_err(Failure::classify)?;
    for f in fits.iter().filter(|f| !f.diagnostics.converged) {
        log::warn!(
            "{} fit did not converge; estimates are from the last iteration",
            f.variant
        );
    }
    let report = json!({
        "data": args.data.data.display().to_string(),
        "design": study.design.label(),
        "main_subjects": study.n_main(),
        "validation_subjects": study.n_validation(),
        "config": config,
        "fits": fits.iter().map(|f| fit_json(f, args.tref)).collect::<Result<Vec<_>, _>>()?,
    });
    let table = fit_table(&fits, args.tref);
    write_output(&args.data.out, "fit.json", &pretty(&report))?;
    write_output(&args.data.out, "fit.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes") + "\n"
}

fn infer_design(args: &DataArgs) -> Result<Design, Failure> {
    let study =
        load_long_csv(&args.data, &CsvSchema::new(Design::MsIvs)).map_err(Failure::classify)?;
    Ok(if study.validation.iter().any(|p| p.outcome.is_some()) {
        Design::MsIvs
    } else {
        Design::MsEvs
    })
}

pub fn diagnose(args: &DiagnoseArgs) -> CmdResult {
    let design = match args.design {
        Some(d) => d,
        None => infer_design(&args.data)?,
    };
    let study = load(&args.data, design)?;
    if study.validation.iter().all(|p| p.n_true() == 0) {
        return Err(Failure::user(anyhow!(
            "{} has no validation measurements",
            args.data.data.display()
        )));
    }
    let config = config(&args.data, &study);
    let test =
        localized_error_test(&study.validation, &config.mem_design).map_err(Failure::classify)?;
    let fit = with_threads(args.data.threads, || {
        fit_corrected(&study, &config, Variant::PredictedAll)
    })
    .map_err(Failure::classify)?;
    let approximation = fit.diagnostics.approximation.unwrap_or(0.0);
    let localized = if test.p_value >= args.level {
        "assumption consistent"
    } else {
        "assumption violated"
    };
    let approx_flag = if approximation < APPROXIMATION_THRESHOLD {
        "approximation reliable"
    } else {
        "approximation suspect"
    };
    let report = json!({
        "data": args.data.data.display().to_string(),
        "design": study.design.label(),
        "localized_error_test": {
            "f_statistic": test.f_stat,
            "df1": test.df1,
            "df2": test.df2,
            "p_value": test.p_value,
            "level": args.level,
            "flag": localized,
        },
        "approximation": {
            "value": approximation,
            "threshold": APPROXIMATION_THRESHOLD,
            "flag": approx_flag,
        },
    });
    let mut table = String::new();
    let _ = writeln!(
        table,
        "localized error test: F({}, {}) = {:.4}, p = {:.4} -> {localized}",
        test.df1, test.df2, test.f_stat, test.p_value
    );
    let _ = writeln!(
        table,
        "approximation diagnostic: {approximation:.4} (threshold {APPROXIMATION_THRESHOLD}) -> {approx_flag}"
    );
    write_output(&args.data.out, "diagnose.json", &pretty(&report))?;
    write_output(&args.data.out, "diagnose.txt", &table)?;
    print!("{table}");
    Ok(())
}
