//! Co-mining at desk scale: training a dense detector on sparsely annotated
//! synthetic scenes by promoting each Siamese branch's confident detections
//! into pseudo-labels that supervise the opposite branch alongside the
//! annotated ground truth.
//!
//! The crate is organized along the pipeline:
//!
//! - [`geometry`] — box arithmetic: IoU, IoU matrices, NMS.
//! - [`dataset`] — COCO-schema subset ingest/persistence and the annotation
//!   erasure protocols (easy/hard/extreme/per-category miss rate).
//! - [`scene`] — synthetic scene generation, feature-map rendering, and
//!   photometric augmentation (the second training view).
//! - [`model`] — a toy dense anchor detector: pointwise backbone + linear
//!   head, box encode/decode, anchor assignment, focal / smooth-L1 / IoU
//!   losses with analytic gradients, SGD with momentum, checkpoints.
//! - [`cogen`] — pseudo-label co-generation (score filter, class-agnostic
//!   NMS, annotated-overlap drop) and the merge into complete label sets.
//! - [`train`] — the Siamese training loop with cross-branch supervision,
//!   warmup + step-decay LR schedule, divergence detection, and baselines.
//! - [`eval`] — COCO-style average precision over IoU thresholds and size
//!   buckets.
//!
//! All numeric modules are generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix the default `f64` precision used by the trainer and
//! the CLI.

pub mod cogen;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod scalar;
pub mod scene;
pub mod train;

pub use scalar::Scalar;

/// Default scalar precision for training and evaluation.
pub type Real = f64;

pub type BBox = geometry::BBox<Real>;
pub type Detection = geometry::Detection<Real>;
pub type GtInstance = dataset::GtInstance<Real>;
pub type LabelSet = dataset::LabelSet<Real>;
pub type SparseDataset = dataset::SparseDataset<Real>;
pub type SceneConfig = scene::SceneConfig<Real>;
pub type FeatureMap = scene::FeatureMap<Real>;
pub type AnchorGrid = model::AnchorGrid<Real>;
pub type ModelParams = model::ModelParams<Real>;
pub type DensePrediction = model::DensePrediction<Real>;
pub type PseudoLabelSet = cogen::PseudoLabelSet<Real>;
pub type CompleteLabelSet = cogen::CompleteLabelSet<Real>;
