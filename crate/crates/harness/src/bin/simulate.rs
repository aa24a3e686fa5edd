use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use harness::{emit_report, run_scenario, Format, HarnessError, SimConfig};

/// Run a dataplane scenario in virtual time and write its report.
#[derive(Debug, Parser)]
#[command(name = "simulate", version)]
struct Args {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Scenario name; overrides the one in the file.
    #[arg(long)]
    scenario: Option<String>,
    /// RNG seed; overrides the one in the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Report destination.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Keep the accounting but never gate work on budgets.
    #[arg(long)]
    ablate_no_budget: bool,
    /// Virtual run length; overrides the one in the file.
    #[arg(long)]
    duration_ms: Option<f64>,
}

fn run(args: Args) -> Result<(), HarnessError> {
    let mut config = SimConfig::load(&args.config)?;
    if let Some(name) = args.scenario {
        config.scenario.name = name;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(ms) = args.duration_ms {
        config.duration_ms = ms;
    }
    config.ablate_no_budget |= args.ablate_no_budget;
    let report = run_scenario(&config)?;
    emit_report(&report, args.format, &args.out)
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("simulate: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
