//! `comining` — synthetic-data workbench for training a dense detector on
//! sparsely annotated scenes, with cross-branch pseudo-label mining.
//!
//! The subcommands chain into a pipeline:
//!
//! ```text
//! synth --> sparsify --> train --> eval --> report
//! ```
//!
//! Every command writes a `manifest.json` into its output directory naming
//! the config, seed, and SHA-256 of each file read and written. Exit codes:
//! 0 success, 2 usage or config error, 3 training diverged, 4 I/O failure.

mod commands;
mod configs;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "comining",
    version,
    about = "Detector training on sparsely annotated synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic detection dataset (tensors + annotations).
    Synth {
        /// Dataset recipe (TOML).
        #[arg(long, env = "COMINING_CONFIG")]
        config: PathBuf,
        /// Scene-layout and noise seed (class signatures come from the
        /// config's signature_seed instead).
        #[arg(long, env = "COMINING_SEED", default_value_t = 0)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long, env = "COMINING_OUT")]
        out: PathBuf,
    },
    /// Erase annotations from a dataset under a sparsification protocol.
    Sparsify {
        /// Input dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// One of: full, easy, hard, extreme, miss:<rate>.
        #[arg(long)]
        protocol: String,
        /// Erasure-draw seed.
        #[arg(long, env = "COMINING_SEED", default_value_t = 0)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long, env = "COMINING_OUT")]
        out: PathBuf,
    },
    /// Train a detector; writes log, summary, and checkpoints to a run dir.
    Train {
        /// Training configuration (TOML): `data = "<dir>"` plus an optional
        /// [train] section.
        #[arg(long, env = "COMINING_CONFIG")]
        config: PathBuf,
        /// Overrides train.seed from the config.
        #[arg(long, env = "COMINING_SEED")]
        seed: Option<u64>,
        /// Run directory.
        #[arg(long, env = "COMINING_OUT")]
        out: PathBuf,
    },
    /// Score a checkpoint or a detections file against a dataset.
    Eval {
        /// Checkpoint to run inference from (on the stored, un-augmented
        /// tensors).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pre-computed detections (JSON array) instead of a checkpoint.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Dataset directory holding the ground truth.
        #[arg(long)]
        data: PathBuf,
        /// Optional thresholds/metric configuration (TOML).
        #[arg(long, env = "COMINING_CONFIG")]
        config: Option<PathBuf>,
        /// Output directory for metrics.
        #[arg(long, env = "COMINING_OUT")]
        out: PathBuf,
    },
    /// Aggregate run directories into a protocol x mode AP table.
    Report {
        /// Run directories (each holding summary.json and metrics.json).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output directory for the report and series files.
        #[arg(long, env = "COMINING_OUT")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { config, seed, out } => commands::run_synth(config, *seed, out),
        Command::Sparsify {
            data,
            protocol,
            seed,
            out,
        } => commands::run_sparsify(data, protocol, *seed, out),
        Command::Train { config, seed, out } => commands::run_train(config, *seed, out),
        Command::Eval {
            checkpoint,
            detections,
            data,
            config,
            out,
        } => commands::run_eval(
            checkpoint.as_deref(),
            detections.as_deref(),
            data,
            config.as_deref(),
            out,
        ),
        Command::Report { runs, out } => commands::run_report(runs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
