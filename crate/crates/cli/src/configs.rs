//! On-disk configuration schemas (TOML) for the subcommands that take
//! `--config`, plus the detection-results file format `eval --detections`
//! accepts.
//!
//! All schemas reject unknown fields so a typo fails loudly with the field
//! named, instead of silently falling back to a default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use comining::eval::EvalConfig;
use comining::train::TrainConfig;

use crate::error::CliError;

/// `synth --config`: the synthetic dataset recipe.
///
/// Datasets that must share a class vocabulary (e.g. a train/val pair) must
/// be generated with the same `signature_seed`; the `--seed` flag only
/// drives scene layout and noise, never what the classes look like.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of images; zero is allowed and yields a valid empty dataset.
    pub n_images: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Feature channels per cell.
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub num_classes: usize,
    /// Inclusive range of objects per image.
    #[serde(default = "default_objects_per_image")]
    pub objects_per_image: [usize; 2],
    /// Inclusive range of object width/height in cells.
    #[serde(default = "default_object_size")]
    pub object_size: [usize; 2],
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    /// Seed of the per-class channel signatures (not of the scene layout).
    #[serde(default)]
    pub signature_seed: u64,
}

fn default_channels() -> usize {
    8
}

fn default_objects_per_image() -> [usize; 2] {
    [3, 6]
}

fn default_object_size() -> [usize; 2] {
    [1, 1]
}

fn default_noise_sigma() -> f64 {
    0.4
}

/// `train --config`: where the data lives plus the full trainer
/// configuration. Every `[train]` field is optional and defaults to the
/// library defaults, so a minimal file is just `data = "path/to/dataset"`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    /// Dataset directory (as produced by `synth` or `sparsify`).
    pub data: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

/// `eval --config`: inference thresholds plus the metric definition. All
/// fields are optional; `eval` without `--config` uses exactly these
/// defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalFileConfig {
    /// Score floor applied when predicting from a checkpoint.
    pub score_thr: f64,
    /// Per-class NMS threshold applied when predicting from a checkpoint.
    pub nms_thr: f64,
    pub metrics: EvalConfig,
}

impl Default for EvalFileConfig {
    fn default() -> Self {
        Self {
            score_thr: 0.05,
            nms_thr: 0.5,
            metrics: EvalConfig::default(),
        }
    }
}

/// One detection in a results file (`eval --detections`): a JSON array of
/// these, in the dataset's category-id space, boxes as `[x, y, w, h]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetRecord {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Reads and parses a TOML config file, classifying failures: unreadable
/// file -> I/O, unparsable or invalid content -> config error naming the
/// offending field.
pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
