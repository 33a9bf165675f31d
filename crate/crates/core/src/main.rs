use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use trac::cli::{self, CommonArgs, EXIT_OK, EXIT_VIOLATION};

/// Sparse-representation visual tracker.
#[derive(Debug, Parser)]
#[command(name = "trac", version)]
struct Cli {
    /// JSON run config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sequences tracked in parallel.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Track sequences in OTB layout.
    Track { sequences: Vec<PathBuf> },
    /// Score a results CSV against a sequence's ground truth.
    Eval { results: PathBuf, sequence: PathBuf },
    /// Render a synthetic sequence from a JSON spec.
    Synth { spec: Option<PathBuf> },
    /// Solve a coefficient problem and check the objective trace.
    SolveDemo { problem: Option<PathBuf> },
}

fn run(cli: Cli) -> Result<i32, cli::CliError> {
    let args = CommonArgs {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        jobs: cli.jobs,
    };
    match cli.command {
        Command::Track { sequences } => cli::cmd_track(&args, &sequences)?,
        Command::Eval { results, sequence } => {
            let s = cli::cmd_eval(&args, &results, &sequence)?;
            println!(
                "precision@20 {:.4} success AUC {:.4} over {} frames",
                s.precision_at_20, s.success_auc, s.frames
            );
        }
        Command::Synth { spec } => {
            let seq = cli::cmd_synth(&args, spec.as_deref())?;
            println!("{} frames", seq.len());
        }
        Command::SolveDemo { problem } => {
            let text = match &problem {
                Some(p) => std::fs::read_to_string(p)
                    .map_err(|e| cli::CliError::Config(format!("{}: {e}", p.display())))?,
                None => cli::DEMO_PROBLEM.to_string(),
            };
            let report = cli::cmd_solve_demo(&text, &mut std::io::stdout().lock())?;
            if report.violation.is_some() {
                return Ok(EXIT_VIOLATION);
            }
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TRAC_LOG", "info")).init();
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
