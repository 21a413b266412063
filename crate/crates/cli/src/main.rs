//! `lmec`: simulation studies, corrected fits and diagnostics from the shell.
//!
//! Exit codes: 0 on success, 1 for bad input or configuration, 2 when the
//! numerics fail.

mod analyze;
mod simulate;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lmec_core::correct::Variant;
use lmec_core::dataset::Design;
use lmec_core::exposure::HistoryFunctional;
use lmec_core::gee::{CorrStructure, LinkFunction};

#[derive(Debug, Parser)]
#[command(
    name = "lmec",
    version,
    about = "Measurement-error-corrected GEE for longitudinal exposure histories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a simulation scenario and write the metrics report.
    Simulate(SimulateArgs),
    /// Fit corrected and uncorrected outcome models to a long-format CSV.
    Fit(FitArgs),
    /// Check the localized error assumption and the approximation diagnostic.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario JSON; missing fields take their defaults.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for report.json and report.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Long CSV with columns role,id,time,y,C,c,W1..Wp.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "cumavg")]
    functional: HistoryFunctional,
    #[arg(long, default_value = "logit")]
    link: LinkFunction,
    #[arg(long, default_value = "ar1")]
    mem_corr: CorrStructure,
    #[arg(long, default_value = "ar1")]
    outcome_corr: CorrStructure,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    design: Design,
    /// Corrected variants to fit; repeat or comma-separate. The uncorrected
    /// fit is always added for comparison.
    #[arg(long, value_delimiter = ',', default_value = "predicted")]
    variant: Vec<Variant>,
    /// Reference time for the odds ratio `exp(β₁ + β₃t)`.
    #[arg(long)]
    tref: Option<f64>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Defaults to internal validation when any validation row carries an outcome.
    #[arg(long)]
    design: Option<Design>,
    /// Significance level of the localized error test.
    #[arg(long, default_value_t = 0.05)]
    level: f64,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub numerical: bool,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn user(error: impl Into<anyhow::Error>) -> Self {
        Self {
            numerical: false,
            error: error.into(),
        }
    }

    pub fn classify(error: impl Into<lmec_core::Error>) -> Self {
        let error = error.into();
        Self {
            numerical: error.is_numerical(),
            error: error.into(),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn write_output(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::user(anyhow::anyhow!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| Failure::user(anyhow::anyhow!("cannot write {}: {e}", path.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate::run(&args),
        Command::Fit(args) => analyze::fit(&args),
        Command::Diagnose(args) => analyze::diagnose(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(if f.numerical { 2 } else { 1 })
        }
    }
}
