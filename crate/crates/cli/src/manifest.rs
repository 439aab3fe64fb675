//! Run manifests: one `manifest.json` per output directory, recording what
//! command produced it, from what configuration and seed, and the SHA-256 of
//! every file read and written.
//!
//! The manifest is written last, after all other artifacts, so a complete
//! manifest implies a complete run. Two runs with the same command, config,
//! seed, and input hashes produce byte-identical outputs; only the
//! `created_utc` stamp (and therefore the manifest itself) differs between
//! them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// A file the run read or wrote, with its content hash.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// RFC 3339 UTC timestamp; informational only, excluded from any
    /// reproducibility comparison.
    pub created_utc: String,
    /// The RNG seed the run used, if the command consumes one.
    pub seed: Option<u64>,
    /// Full snapshot of the effective configuration (after flag overrides).
    pub config: serde_json::Value,
    /// Free-form command context: protocol, mode, status, counts.
    pub context: BTreeMap<String, String>,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            created_utc: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            seed,
            config,
            context: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records an input file under the path it was named by on the command
    /// line or in the config.
    pub fn push_input(&mut self, file: &Path) -> Result<(), CliError> {
        self.inputs.push(ArtifactRef {
            path: file.display().to_string(),
            sha256: sha256_file(file)?,
        });
        Ok(())
    }

    /// Records an output file under its path relative to the run directory.
    pub fn push_output(&mut self, run_dir: &Path, rel: &str) -> Result<(), CliError> {
        self.outputs.push(ArtifactRef {
            path: rel.to_string(),
            sha256: sha256_file(&run_dir.join(rel))?,
        });
        Ok(())
    }

    pub fn insert_context(&mut self, key: &str, value: impl ToString) {
        self.context.insert(key.to_string(), value.to_string());
    }

    /// Serializes to `<dir>/manifest.json`. Callers invoke this exactly once,
    /// as the final write of the command.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Io(format!("failed to encode manifest: {e}")))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
