use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use verigin::cli::{self, Command, ErrorReport};
use verigin::config::ExperimentConfig;
use verigin::equilibria::Case;
use verigin::output::write_json;
use verigin::Result;

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum CaseArg {
    I,
    Ii,
}

/// Flat two-phase capillary equilibria: stability analysis and dynamics.
#[derive(Parser, Debug)]
#[command(name = "verigin", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: $VERIGIN_OUT, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the phase-transition case of the config.
    #[arg(long, value_enum)]
    case: Option<CaseArg>,
    /// Parameter sweep, e.g. `sigma=0.05:0.2:4`.
    #[arg(long)]
    sweep: Option<String>,
}

fn run(args: &Args, out: &std::path::Path) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(c) = args.case {
        let case = match c {
            CaseArg::I => Case::I,
            CaseArg::Ii => Case::II,
        };
        cli::override_case(&mut cfg, case)?;
    }
    let outcome = match &args.sweep {
        Some(spec) => cli::run_sweep(args.command, &cfg, out, spec)?,
        None => cli::run_subcommand(args.command, &cfg, out)?,
    };
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let out = cli::resolve_out_dir(args.out.clone());
    match run(&args, &out) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}: one or more checks failed", args.command.name());
            ExitCode::from(1)
        }
        Err(e) => {
            let report = ErrorReport::from(&e);
            eprintln!(
                "{}",
                serde_json::to_string(&report).unwrap_or_else(|_| e.to_string())
            );
            let _ = write_json(&out.join("error.json"), &report);
            ExitCode::from(2)
        }
    }
}
