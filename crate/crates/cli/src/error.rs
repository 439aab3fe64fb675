//! CLI error type and the process exit-code policy.
//!
//! Every failure is classified into one of three exit codes before the
//! process terminates (clap reports flag/usage problems itself, also with
//! code 2):
//!
//! - `2` — the invocation cannot be executed as given: bad flags, malformed
//!   or invalid config files, inputs that fail validation.
//! - `3` — training ran but diverged; partial artifacts were kept.
//! - `4` — the operating system refused a read or write.

use std::path::Path;

use comining::dataset::DatasetError;
use comining::eval::EvalError;
use comining::model::ModelError;
use comining::scene::SceneError;
use comining::train::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// The command line or a config/input file is unusable (exit 2).
    #[error("{0}")]
    Config(String),
    /// Training aborted after three consecutive bad iterations (exit 3).
    #[error("training diverged at iteration {at_iter}; partial log and summary were kept")]
    Diverged { at_iter: usize },
    /// An underlying read or write failed (exit 4).
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::Io(_) => 4,
        }
    }

    /// Wraps an OS-level error with the path it concerns.
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io(format!("failed to access {}: {source}", path.display()))
    }
}

/// Malformed input files count as usage errors; only OS failures map to the
/// I/O exit code. The same policy is applied to every wrapped library error
/// below.
pub fn from_dataset(e: DatasetError) -> CliError {
    match e {
        DatasetError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

pub fn from_scene(e: SceneError) -> CliError {
    match e {
        SceneError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

pub fn from_model(e: ModelError) -> CliError {
    match e {
        ModelError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

pub fn from_train(e: TrainError) -> CliError {
    match e {
        TrainError::Dataset(d) => from_dataset(d),
        TrainError::Scene(s) => from_scene(s),
        TrainError::Model(m) => from_model(m),
        TrainError::Artifact { .. } | TrainError::Csv { .. } => CliError::Io(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

pub fn from_eval(e: EvalError) -> CliError {
    CliError::Config(e.to_string())
}
