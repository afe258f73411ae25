//! Thin command-line front end; all verb logic lives in
//! [`graphreason::commands`].

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graphreason::commands::{self, CommonArgs};

#[derive(Parser)]
#[command(
    name = "graphreason",
    about = "Train and evaluate region-level scene reasoning models on synthetic scenes",
    version
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,

    /// Run configuration file (flat `key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override both the data and training seeds.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Checkpoint to evaluate, sweep, or resume training from.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,

    /// Directory for artifacts (logs, checkpoints, metrics, CSV).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verb {
    /// Verify every backward rule against central finite differences.
    Gradcheck,
    /// Generate the synthetic dataset and export it to --out.
    #[command(name = "gen-data")]
    GenData,
    /// Train a model; writes log and checkpoints to --out.
    Train,
    /// Score a checkpoint on the configured split.
    Eval,
    /// Region-drop robustness sweep over the configured thresholds.
    Sweep,
    /// Summarize the artifacts in --out.
    Report,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let args = CommonArgs {
        config: cli.config,
        seed: cli.seed,
        checkpoint: cli.checkpoint,
        out: cli.out,
    };
    let result = match cli.verb {
        Verb::Gradcheck => commands::run_gradcheck(&args).map(|ok| {
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }),
        Verb::GenData => commands::run_gen_data(&args).map(|_| ExitCode::SUCCESS),
        Verb::Train => commands::run_train(&args).map(|_| ExitCode::SUCCESS),
        Verb::Eval => commands::run_eval(&args).map(|_| ExitCode::SUCCESS),
        Verb::Sweep => commands::run_sweep(&args).map(|_| ExitCode::SUCCESS),
        Verb::Report => commands::run_report(&args).map(|text| {
            print!("{text}");
            ExitCode::SUCCESS
        }),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
