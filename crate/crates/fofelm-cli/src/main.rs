//! `fofelm` — reproducible multi-dialect language-model experiments.
//!
//! Exit codes: 0 success, 1 usage/config, 2 data, 3 internal.

use clap::{Parser, Subcommand};
use fofelm_cli::commands;
use fofelm_cli::config::load_config;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fofelm", version, about = "Multi-dialect feedforward language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic tagged corpora and ground-truth distributions.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Build the top-K vocabulary from the train splits and report coverage.
    BuildVocab {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the base model (BASE or PT_A per the config).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train dialect adapters (RI_A or FT_A per the config).
    Adapt {
        #[arg(long)]
        config: PathBuf,
        /// Base checkpoint; defaults to the run's base checkpoint.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Evaluate checkpoints: perplexity per (dialect, application) + audits.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Explicit checkpoints; defaults to everything under the run dir.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Latency micro-benchmark of one checkpoint.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Benchmark runs (defaults to the config's bench_runs, normally 3).
        #[arg(long)]
        runs: Option<usize>,
    },
    /// List a checkpoint's parameter groups, roles, and counts.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare all evaluation reports in the run directory.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> fofelm::Result<()> {
    match cli.command {
        Command::Generate { config } => commands::cmd_generate(&load_config(config)?),
        Command::BuildVocab { config } => commands::cmd_build_vocab(&load_config(config)?),
        Command::Train { config, resume } => commands::cmd_train(&load_config(config)?, resume),
        Command::Adapt { config, base } => commands::cmd_adapt(&load_config(config)?, base),
        Command::Eval { config, checkpoint } => {
            commands::cmd_eval(&load_config(config)?, checkpoint)
        }
        Command::Bench {
            config,
            checkpoint,
            runs,
        } => commands::cmd_bench(&load_config(config)?, checkpoint, runs),
        Command::Inspect { checkpoint } => commands::cmd_inspect(&checkpoint),
        Command::Compare { config } => commands::cmd_compare(&load_config(config)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep clap's rendering but normalize the exit code: anything
            // that isn't an explicit help/version request is a usage error.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
