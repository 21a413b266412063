use anyhow::anyhow;
use lmec_core::exec::{with_threads, Execution};
use lmec_core::simlab::{run_replicates, Scenario};

use crate::{write_output, CmdResult, Failure, SimulateArgs};

pub fn run(args: &SimulateArgs) -> CmdResult {
    let text = std::fs::read_to_string(&args.scenario).map_err(|e| {
        Failure::user(anyhow!(
            "cannot read scenario {}: {e}",
            args.scenario.display()
        ))
    })?;
    let mut scenario = Scenario::from_json(&text)
        .map_err(|e| Failure::user(anyhow!("scenario {}: {e}", args.scenario.display())))?;
    if let Some(n) = args.replicates {
        scenario.replicates = n;
    }
    if let Some(seed) = args.seed {
        scenario.base_seed = seed;
    }
    scenario.validate().map_err(Failure::classify)?;
    log::info!(
        "running {} replicates of {}",
        scenario.replicates,
        scenario.name
    );
    let report = with_threads(args.threads, || {
        run_replicates(&scenario, Execution::Parallel)
    })
    .map_err(Failure::classify)?;
    let table = report.table();
    write_output(&args.out, "report.json", &report.to_json())?;
    write_output(&args.out, "report.txt", &table)?;
    print!("{table}");
    Ok(())
}
