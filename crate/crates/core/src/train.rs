//! The training loop: four supervision modes over a Siamese weight-shared
//! detector, SGD with momentum and a warmup/step schedule, divergence
//! detection, and deterministic run artifacts.
//!
//! Modes:
//!
//! - `original` — single branch on the stored tensors, supervised by the
//!   kept annotations only;
//! - `augmented` — single branch on the augmented view;
//! - `joint` — both branches, each supervised by the kept annotations;
//! - `comining` — both branches; each branch's confident detections are
//!   distilled into pseudo-labels (see [`crate::cogen`]) and handed to the
//!   *other* branch, merged with the kept annotations.
//!
//! One seeded generator drives the whole run — initialization, epoch
//! shuffles, augmentation draws — so a (config, seed, data) triple fully
//! determines every artifact byte. Pseudo-label generation consumes no
//! randomness, which keeps `comining` with an unreachable score gate
//! (`tau > 1`) on the exact same draw stream as `joint`: the two runs then
//! produce bitwise-identical parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cogen::{co_generate, merge, Branch, CoGenConfig};
use crate::dataset::{load_dataset, DatasetError, GtInstance, SparseDataset};
use crate::model::{
    assign, backward, decode_detections, focal_loss, forward_cached, iou_reg_loss, save_checkpoint,
    sgd_step, smooth_l1_loss, AnchorGrid, DensePrediction, ForwardCache, ModelDims, ModelError,
    ModelParams, ParamGrads,
};
use crate::scalar::Scalar;
use crate::scene::FeatureMap;
use crate::scene::{augment, read_feature_map, AugConfig, SceneError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset/tensor mismatch: {0}")]
    Data(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("failed to write {path}: {source}")]
    Artifact {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {path}: {message}")]
    Csv { path: PathBuf, message: String },
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Supervision mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Original,
    Augmented,
    Joint,
    CoMining,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Original => "original",
            Mode::Augmented => "augmented",
            Mode::Joint => "joint",
            Mode::CoMining => "comining",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" => Ok(Mode::Original),
            "augmented" => Ok(Mode::Augmented),
            "joint" => Ok(Mode::Joint),
            "comining" => Ok(Mode::CoMining),
            other => Err(format!(
                "unknown mode {other:?} (expected original, augmented, joint, or comining)"
            )),
        }
    }
}

/// Regression loss selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegLoss {
    SmoothL1,
    Iou,
}

/// Optimizer and schedule parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Total optimizer iterations (batches).
    pub n_max: usize,
    /// Images per batch; the final batch of an epoch may be smaller.
    pub batch_size: usize,
    /// Base learning rate.
    pub eta0: f64,
    /// Decay points as fractions of `n_max`; crossing one multiplies the
    /// rate by 0.1.
    pub milestones: Vec<f64>,
    /// Linear warmup length in iterations.
    pub warmup_iters: usize,
    /// Momentum coefficient.
    pub momentum: f64,
    /// A batch loss above this (or non-finite) counts toward divergence;
    /// three consecutive bad iterations abort the run.
    pub divergence_cap: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            n_max: 2000,
            batch_size: 4,
            eta0: 0.05,
            milestones: vec![2.0 / 3.0, 8.0 / 9.0],
            warmup_iters: 22,
            momentum: 0.9,
            divergence_cap: 1e4,
        }
    }
}

/// Detector and loss parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    /// Backbone width `D`.
    pub hidden: usize,
    /// Anchor shapes `(width, height)` in cells, one anchor per shape per
    /// cell.
    pub anchor_shapes: Vec<(f64, f64)>,
    /// Assignment thresholds: max-IoU at or above `pos_thr` is positive,
    /// below `neg_thr` negative, in between ignored.
    pub pos_thr: f64,
    pub neg_thr: f64,
    /// Focal loss balance and focusing parameters.
    pub alpha: f64,
    pub gamma: f64,
    /// Smooth-L1 transition point.
    pub beta: f64,
    pub reg_loss: RegLoss,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden: 32,
            anchor_shapes: vec![(1.0, 1.0)],
            pos_thr: 0.5,
            neg_thr: 0.4,
            alpha: 0.25,
            gamma: 2.0,
            beta: 1.0,
            reg_loss: RegLoss::SmoothL1,
        }
    }
}

/// Full training configuration; the echo of this struct in `summary.json`
/// makes a run self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    /// When set, a checkpoint is also written every this-many iterations.
    pub checkpoint_interval: Option<usize>,
    pub schedule: ScheduleConfig,
    pub model: ModelSettings,
    pub cogen: CoGenConfig<f64>,
    pub aug: AugConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::CoMining,
            seed: 0,
            checkpoint_interval: None,
            schedule: ScheduleConfig::default(),
            model: ModelSettings::default(),
            cogen: CoGenConfig {
                tau: 0.6,
                theta1: 0.5,
                theta2: 0.5,
            },
            aug: AugConfig::Color {
                gain: (0.6, 1.4),
                bias: (-0.2, 0.2),
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        let s = &self.schedule;
        if s.batch_size == 0 {
            return bad("schedule.batch_size must be at least 1".into());
        }
        if !(s.eta0 > 0.0 && s.eta0.is_finite()) {
            return bad(format!("schedule.eta0 must be positive, got {}", s.eta0));
        }
        for &m in &s.milestones {
            if !(m > 0.0 && m <= 1.0) {
                return bad(format!("schedule.milestones entry {m} outside (0, 1]"));
            }
        }
        if s.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("schedule.milestones must be strictly increasing".into());
        }
        if s.n_max > 0 && s.warmup_iters >= s.n_max {
            return bad(format!(
                "schedule.warmup_iters ({}) must be below n_max ({})",
                s.warmup_iters, s.n_max
            ));
        }
        if !(s.momentum >= 0.0 && s.momentum < 1.0) {
            return bad(format!(
                "schedule.momentum must lie in [0, 1), got {}",
                s.momentum
            ));
        }
        if s.divergence_cap.is_nan() || s.divergence_cap <= 0.0 {
            return bad(format!(
                "schedule.divergence_cap must be positive, got {}",
                s.divergence_cap
            ));
        }
        let m = &self.model;
        if m.hidden == 0 {
            return bad("model.hidden must be at least 1".into());
        }
        if m.anchor_shapes.is_empty() {
            return bad("model.anchor_shapes must not be empty".into());
        }
        for &(w, h) in &m.anchor_shapes {
            if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
                return bad(format!(
                    "model.anchor_shapes entry ({w}, {h}) must be positive"
                ));
            }
        }
        if !(0.0 <= m.neg_thr && m.neg_thr <= m.pos_thr && m.pos_thr <= 1.0) {
            return bad(format!(
                "model thresholds must satisfy 0 <= neg_thr ({}) <= pos_thr ({}) <= 1",
                m.neg_thr, m.pos_thr
            ));
        }
        if !(m.alpha > 0.0 && m.alpha < 1.0) {
            return bad(format!("model.alpha must lie in (0, 1), got {}", m.alpha));
        }
        if !(m.gamma >= 0.0 && m.gamma.is_finite()) {
            return bad(format!("model.gamma must be non-negative, got {}", m.gamma));
        }
        if !(m.beta > 0.0 && m.beta.is_finite()) {
            return bad(format!("model.beta must be positive, got {}", m.beta));
        }
        if let Some(k) = self.checkpoint_interval {
            if k == 0 {
                return bad("checkpoint_interval must be at least 1 when set".into());
            }
        }
        self.cogen
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.aug
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// Milestone fractions resolved to iteration indices (`round(f * n_max)`).
pub fn milestone_iters(milestones: &[f64], n_max: usize) -> Vec<usize> {
    milestones
        .iter()
        .map(|f| (f * n_max as f64).round() as usize)
        .collect()
}

/// Learning rate at a 0-based iteration: linear warmup to `eta0` over
/// `warmup_iters`, then a tenfold drop at every crossed milestone.
pub fn lr_schedule(iter: usize, schedule: &ScheduleConfig) -> f64 {
    if iter < schedule.warmup_iters {
        return schedule.eta0 * (iter + 1) as f64 / schedule.warmup_iters as f64;
    }
    let passed = milestone_iters(&schedule.milestones, schedule.n_max)
        .into_iter()
        .filter(|&m| iter >= m)
        .count();
    schedule.eta0 * 0.1f64.powi(passed as i32)
}

// ---------------------------------------------------------------------------
// Data loading
// ---------------------------------------------------------------------------

/// A dataset with its per-image tensors resident in memory, validated for
/// training: every image has a tensor, all tensors share the grid and
/// channel count, and the grid matches the recorded image sizes.
#[derive(Debug)]
pub struct LoadedDataset<S> {
    pub dataset: SparseDataset<S>,
    pub features: BTreeMap<u64, FeatureMap<S>>,
    grid_h: usize,
    grid_w: usize,
    channels: usize,
}

impl<S: Scalar> LoadedDataset<S> {
    pub fn new(
        dataset: SparseDataset<S>,
        features: BTreeMap<u64, FeatureMap<S>>,
    ) -> Result<Self, TrainError> {
        let first = dataset
            .images
            .first()
            .ok_or_else(|| TrainError::Data("dataset has no images".into()))?;
        let (grid_h, grid_w) = (first.height as usize, first.width as usize);
        let mut channels = None;
        for im in &dataset.images {
            if (im.height as usize, im.width as usize) != (grid_h, grid_w) {
                return Err(TrainError::Data(format!(
                    "image {} is {}x{}, expected uniform {}x{}",
                    im.id, im.height, im.width, grid_h, grid_w
                )));
            }
            let fm = features.get(&im.id).ok_or_else(|| {
                TrainError::Data(format!("image {} has no feature tensor", im.id))
            })?;
            if fm.grid_h() != grid_h || fm.grid_w() != grid_w {
                return Err(TrainError::Data(format!(
                    "tensor for image {} is {}x{}, image records {}x{}",
                    im.id,
                    fm.grid_h(),
                    fm.grid_w(),
                    grid_h,
                    grid_w
                )));
            }
            match channels {
                None => channels = Some(fm.channels()),
                Some(c) if c != fm.channels() => {
                    return Err(TrainError::Data(format!(
                        "tensor for image {} has {} channels, expected {c}",
                        im.id,
                        fm.channels()
                    )));
                }
                _ => {}
            }
        }
        if features.len() != dataset.images.len() {
            return Err(TrainError::Data(format!(
                "{} tensors for {} images",
                features.len(),
                dataset.images.len()
            )));
        }
        Ok(Self {
            dataset,
            features,
            grid_h,
            grid_w,
            channels: channels.expect("at least one image"),
        })
    }

    /// Loads `annotations.json` plus `tensors/<file_name>` per image from a
    /// dataset directory.
    pub fn from_dir(dir: &Path) -> Result<Self, TrainError> {
        let dataset = load_dataset::<S>(&dir.join("annotations.json"))?;
        let mut features = BTreeMap::new();
        for im in &dataset.images {
            let path = dir.join("tensors").join(&im.file_name);
            features.insert(im.id, read_feature_map::<S>(&path)?);
        }
        Self::new(dataset, features)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.dataset.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.images.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

/// One row of `train_log.csv`; all losses are batch means, split by branch
/// (`_o` original, `_a` augmented) and by term (`cls_`, `reg_`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_o: f64,
    pub loss_a: f64,
    pub cls_o: f64,
    pub reg_o: f64,
    pub cls_a: f64,
    pub reg_a: f64,
    /// Pseudo-labels mined from the original branch this iteration.
    pub pseudo_o: usize,
    /// Pseudo-labels mined from the augmented branch this iteration.
    pub pseudo_a: usize,
}

/// One row of `pseudo_trace.csv`: a pseudo-label that entered supervision,
/// tagged with the branch that mined it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoRecord {
    pub iter: usize,
    pub image_id: u64,
    pub branch: Branch,
    pub class_id: usize,
    pub score: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Terminal state of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    /// Aborted after three consecutive iterations with a non-finite or
    /// over-cap batch loss; `at_iter` is the third such iteration.
    Diverged {
        at_iter: usize,
    },
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: Mode,
    pub seed: u64,
    /// `"completed"` or `"diverged"`.
    pub status: String,
    pub diverged_at: Option<usize>,
    /// Iterations actually executed (log rows).
    pub iterations: usize,
    /// Last batch loss; omitted when non-finite.
    pub final_loss: Option<f64>,
    pub pseudo_original: u64,
    pub pseudo_augmented: u64,
    pub config: TrainConfig,
}

/// Everything a run produces, independent of whether artifacts were written.
pub struct TrainOutcome<S> {
    pub params: ModelParams<S>,
    pub velocity: ParamGrads<S>,
    pub status: TrainStatus,
    pub log: Vec<IterRecord>,
    pub pseudo_trace: Vec<PseudoRecord>,
    pub summary: TrainSummary,
}

// ---------------------------------------------------------------------------
// The loop
// ---------------------------------------------------------------------------

struct ImageTerms<S> {
    cls_o: S,
    reg_o: S,
    cls_a: S,
    reg_a: S,
    pseudo_o: usize,
    pseudo_a: usize,
}

impl<S: Scalar> ImageTerms<S> {
    fn zero() -> Self {
        Self {
            cls_o: S::zero(),
            reg_o: S::zero(),
            cls_a: S::zero(),
            reg_a: S::zero(),
            pseudo_o: 0,
            pseudo_a: 0,
        }
    }

    fn add(&mut self, other: &Self) {
        self.cls_o += other.cls_o;
        self.reg_o += other.reg_o;
        self.cls_a += other.cls_a;
        self.reg_a += other.reg_a;
        self.pseudo_o += other.pseudo_o;
        self.pseudo_a += other.pseudo_a;
    }
}

/// Losses and parameter gradients of one branch against one label list; the
/// shared implementation every mode funnels through, so identical inputs
/// take an identical floating-point path regardless of mode.
#[allow(clippy::too_many_arguments)]
fn supervise<S: Scalar>(
    settings: &ModelSettings,
    params: &ModelParams<S>,
    anchors: &AnchorGrid<S>,
    pred: &DensePrediction<S>,
    cache: &ForwardCache<S>,
    labels: &[GtInstance<S>],
    grid: (S, S),
    acc: &mut ParamGrads<S>,
) -> (S, S) {
    let asg = assign(
        anchors,
        labels,
        S::lit(settings.pos_thr),
        S::lit(settings.neg_thr),
    );
    let (cls, d_cls) = focal_loss(
        pred,
        &asg,
        labels,
        S::lit(settings.alpha),
        S::lit(settings.gamma),
    );
    let (reg, d_reg) = match settings.reg_loss {
        RegLoss::SmoothL1 => smooth_l1_loss(pred, &asg, anchors, labels, S::lit(settings.beta)),
        RegLoss::Iou => iou_reg_loss(pred, &asg, anchors, labels, grid.0, grid.1),
    };
    acc.add_assign(&backward(params, cache, &d_cls, &d_reg));
    (cls, reg)
}

#[allow(clippy::too_many_arguments)]
fn accumulate_image<S: Scalar>(
    cfg: &TrainConfig,
    params: &ModelParams<S>,
    anchors: &AnchorGrid<S>,
    data: &LoadedDataset<S>,
    image_id: u64,
    iter: usize,
    rng: &mut ChaCha8Rng,
    acc: &mut ParamGrads<S>,
    trace: &mut Vec<PseudoRecord>,
) -> Result<ImageTerms<S>, TrainError> {
    let fm = &data.features[&image_id];
    let labels = data
        .dataset
        .training_labels(image_id)
        .expect("image ids validated at load");
    let (gh, gw) = data.grid();
    let grid = (S::from_count(gw), S::from_count(gh));
    let mut terms = ImageTerms::zero();
    match cfg.mode {
        Mode::Original => {
            let (pred, cache) = forward_cached(params, fm)?;
            let (cls, reg) = supervise(
                &cfg.model,
                params,
                anchors,
                &pred,
                &cache,
                &labels.instances,
                grid,
                acc,
            );
            terms.cls_o = cls;
            terms.reg_o = reg;
        }
        Mode::Augmented => {
            let fm_a = augment(fm, &cfg.aug, rng);
            let (pred, cache) = forward_cached(params, &fm_a)?;
            let (cls, reg) = supervise(
                &cfg.model,
                params,
                anchors,
                &pred,
                &cache,
                &labels.instances,
                grid,
                acc,
            );
            terms.cls_a = cls;
            terms.reg_a = reg;
        }
        Mode::Joint => {
            let fm_a = augment(fm, &cfg.aug, rng);
            let (pred_o, cache_o) = forward_cached(params, fm)?;
            let (pred_a, cache_a) = forward_cached(params, &fm_a)?;
            let (cls, reg) = supervise(
                &cfg.model,
                params,
                anchors,
                &pred_o,
                &cache_o,
                &labels.instances,
                grid,
                acc,
            );
            terms.cls_o = cls;
            terms.reg_o = reg;
            let (cls, reg) = supervise(
                &cfg.model,
                params,
                anchors,
                &pred_a,
                &cache_a,
                &labels.instances,
                grid,
                acc,
            );
            terms.cls_a = cls;
            terms.reg_a = reg;
        }
        Mode::CoMining => {
            let fm_a = augment(fm, &cfg.aug, rng);
            let (pred_o, cache_o) = forward_cached(params, fm)?;
            let (pred_a, cache_a) = forward_cached(params, &fm_a)?;
            let cogen = CoGenConfig {
                tau: S::lit(cfg.cogen.tau),
                theta1: S::lit(cfg.cogen.theta1),
                theta2: S::lit(cfg.cogen.theta2),
            };
            // The score gate is fused into detection materialization: only
            // anchors already at or above tau are decoded. The pipeline's
            // own gate then re-checks the same predicate (a no-op here).
            let dets_o = decode_detections(&pred_o, anchors, cogen.tau);
            let dets_a = decode_detections(&pred_a, anchors, cogen.tau);
            let pg_o = co_generate(&dets_o, labels, &cogen, Branch::Original);
            let pg_a = co_generate(&dets_a, labels, &cogen, Branch::Augmented);
            for pg in [&pg_o, &pg_a] {
                for det in &pg.labels {
                    trace.push(PseudoRecord {
                        iter,
                        image_id,
                        branch: pg.source,
                        class_id: det.class_id,
                        score: det.score.as_f64(),
                        x_min: det.bbox.x_min.as_f64(),
                        y_min: det.bbox.y_min.as_f64(),
                        x_max: det.bbox.x_max.as_f64(),
                        y_max: det.bbox.y_max.as_f64(),
                    });
                }
            }
            terms.pseudo_o = pg_o.len();
            terms.pseudo_a = pg_a.len();
            // Cross-wiring: each branch trains on the other's pseudo-labels.
            let c_o = merge(&pg_a, labels);
            let c_a = merge(&pg_o, labels);
            let (cls, reg) = supervise(
                &cfg.model,
                params,
                anchors,
                &pred_o,
                &cache_o,
                c_o.as_instances(),
                grid,
                acc,
            );
            terms.cls_o = cls;
            terms.reg_o = reg;
            let (cls, reg) = supervise(
                &cfg.model,
                params,
                anchors,
                &pred_a,
                &cache_a,
                c_a.as_instances(),
                grid,
                acc,
            );
            terms.cls_a = cls;
            terms.reg_a = reg;
        }
    }
    Ok(terms)
}

/// Runs one full training session. When `run_dir` is given, the artifacts
/// (`train_log.csv`, `summary.json`, `checkpoint.bin`, and for `comining`
/// runs `pseudo_trace.csv`) are written there; the final checkpoint is
/// skipped on divergence.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    data: &LoadedDataset<S>,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    if data.dataset.num_classes() == 0 {
        return Err(TrainError::Data("dataset has no categories".into()));
    }
    let (grid_h, grid_w) = data.grid();
    let dims = ModelDims {
        channels: data.channels(),
        hidden: cfg.model.hidden,
        num_classes: data.dataset.num_classes(),
        num_shapes: cfg.model.anchor_shapes.len(),
    };
    let shapes: Vec<(S, S)> = cfg
        .model
        .anchor_shapes
        .iter()
        .map(|&(w, h)| (S::lit(w), S::lit(h)))
        .collect();
    let anchors = AnchorGrid::build(grid_h, grid_w, &shapes);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::<S>::init(dims, &mut rng);
    let mut velocity = ParamGrads::zeros_like(&params);
    let image_ids: Vec<u64> = data.dataset.images.iter().map(|im| im.id).collect();
    let schedule = &cfg.schedule;

    let mut log: Vec<IterRecord> = Vec::with_capacity(schedule.n_max);
    let mut trace: Vec<PseudoRecord> = Vec::new();
    let mut status = TrainStatus::Completed;
    let mut bad_streak = 0usize;
    let mut iter = 0usize;
    let (mut total_pseudo_o, mut total_pseudo_a) = (0u64, 0u64);

    'training: while iter < schedule.n_max {
        // One epoch: Fisher–Yates shuffle (explicit, so the draw pattern is
        // part of the determinism contract), then contiguous batches with
        // the remainder kept as a short final batch.
        let mut order = image_ids.clone();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(schedule.batch_size) {
            if iter >= schedule.n_max {
                break 'training;
            }
            let lr = lr_schedule(iter, schedule);
            let mut acc = ParamGrads::zeros_like(&params);
            let mut terms = ImageTerms::<S>::zero();
            for &image_id in batch {
                let t = accumulate_image(
                    cfg, &params, &anchors, data, image_id, iter, &mut rng, &mut acc, &mut trace,
                )?;
                terms.add(&t);
            }
            let inv = S::one() / S::from_count(batch.len());
            acc.scale(inv);
            let cls_o = (terms.cls_o * inv).as_f64();
            let reg_o = (terms.reg_o * inv).as_f64();
            let cls_a = (terms.cls_a * inv).as_f64();
            let reg_a = (terms.reg_a * inv).as_f64();
            let loss = ((terms.cls_o + terms.reg_o + terms.cls_a + terms.reg_a) * inv).as_f64();
            log.push(IterRecord {
                iter,
                lr,
                loss,
                loss_o: cls_o + reg_o,
                loss_a: cls_a + reg_a,
                cls_o,
                reg_o,
                cls_a,
                reg_a,
                pseudo_o: terms.pseudo_o,
                pseudo_a: terms.pseudo_a,
            });
            total_pseudo_o += terms.pseudo_o as u64;
            total_pseudo_a += terms.pseudo_a as u64;

            let bad = !loss.is_finite() || loss > schedule.divergence_cap;
            bad_streak = if bad { bad_streak + 1 } else { 0 };
            if bad_streak >= 3 {
                status = TrainStatus::Diverged { at_iter: iter };
                break 'training;
            }
            sgd_step(
                &mut params,
                &mut velocity,
                &acc,
                S::lit(lr),
                S::lit(schedule.momentum),
            );
            iter += 1;
            if let (Some(every), Some(dir)) = (cfg.checkpoint_interval, run_dir) {
                if iter.is_multiple_of(every) {
                    fs::create_dir_all(dir).map_err(|source| TrainError::Artifact {
                        path: dir.to_path_buf(),
                        source,
                    })?;
                    let path = dir.join(format!("checkpoint_{iter:06}.bin"));
                    save_checkpoint(&path, &params, &velocity, &shapes)?;
                }
            }
        }
    }

    let final_loss = log.last().map(|r| r.loss).filter(|l| l.is_finite());
    let summary = TrainSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        status: match status {
            TrainStatus::Completed => "completed".into(),
            TrainStatus::Diverged { .. } => "diverged".into(),
        },
        diverged_at: match status {
            TrainStatus::Diverged { at_iter } => Some(at_iter),
            TrainStatus::Completed => None,
        },
        iterations: log.len(),
        final_loss,
        pseudo_original: total_pseudo_o,
        pseudo_augmented: total_pseudo_a,
        config: cfg.clone(),
    };

    if let Some(dir) = run_dir {
        write_artifacts(
            dir, cfg, &params, &velocity, &shapes, &log, &trace, &summary, status,
        )?;
    }
    Ok(TrainOutcome {
        params,
        velocity,
        status,
        log,
        pseudo_trace: trace,
        summary,
    })
}

const LOG_HEADER: [&str; 11] = [
    "iter", "lr", "loss", "loss_o", "loss_a", "cls_o", "reg_o", "cls_a", "reg_a", "pseudo_o",
    "pseudo_a",
];
const TRACE_HEADER: [&str; 9] = [
    "iter", "image_id", "branch", "class_id", "score", "x_min", "y_min", "x_max", "y_max",
];

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), TrainError> {
    let csv_err = |message: String| TrainError::Csv {
        path: path.to_path_buf(),
        message,
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    w.write_record(header).map_err(|e| csv_err(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(e.to_string()))?;
    }
    w.flush().map_err(|e| csv_err(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
fn write_artifacts<S: Scalar>(
    dir: &Path,
    cfg: &TrainConfig,
    params: &ModelParams<S>,
    velocity: &ParamGrads<S>,
    shapes: &[(S, S)],
    log: &[IterRecord],
    trace: &[PseudoRecord],
    summary: &TrainSummary,
    status: TrainStatus,
) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(|source| TrainError::Artifact {
        path: dir.to_path_buf(),
        source,
    })?;
    write_csv(&dir.join("train_log.csv"), &LOG_HEADER, log)?;
    if cfg.mode == Mode::CoMining {
        write_csv(&dir.join("pseudo_trace.csv"), &TRACE_HEADER, trace)?;
    }
    let summary_path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(summary).expect("summary has no non-finite floats");
    fs::write(&summary_path, text + "\n").map_err(|source| TrainError::Artifact {
        path: summary_path.clone(),
        source,
    })?;
    if status == TrainStatus::Completed {
        save_checkpoint(&dir.join("checkpoint.bin"), params, velocity, shapes)?;
    }
    Ok(())
}
