//! Pseudo-label co-generation.
//!
//! During co-mining, each Siamese branch turns its own raw detections into a
//! pseudo-label set through a fixed three-stage pipeline, and the two sets
//! are then swapped across branches: the original view trains against the
//! augmented view's pseudo-labels plus the sparse annotations, and vice
//! versa. The swap is what keeps a branch from simply confirming its own
//! mistakes.
//!
//! The pipeline, in order:
//!
//! 1. score gate — keep detections with `score >= tau`;
//! 2. class-agnostic NMS at `theta1` — dedupe across classes, since the same
//!    latent object often fires under several class heads;
//! 3. annotation suppression at `theta2` — drop survivors overlapping any
//!    existing annotation with IoU strictly above `theta2`, so pseudo-labels
//!    only ever add objects the annotations miss.

use serde::{Deserialize, Serialize};

use crate::dataset::{GtInstance, LabelSet};
use crate::geometry::{iou, nms, Detection};
use crate::scalar::Scalar;

/// Instance ids minted for pseudo-labels start here, far above any id a
/// synthetic dataset generates, so merged label sets never collide with
/// real annotations.
pub const PSEUDO_ID_BASE: u64 = 1 << 48;

/// Which Siamese view produced a detection or pseudo-label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Original,
    Augmented,
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Branch::Original => "original",
            Branch::Augmented => "augmented",
        })
    }
}

/// Pipeline thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoGenConfig<S> {
    /// Score gate; detections below it never become pseudo-labels. Values
    /// above 1 are allowed and disable mining entirely (no sigmoid score
    /// reaches them), which turns co-mining into plain two-view training.
    pub tau: S,
    /// Class-agnostic NMS threshold.
    pub theta1: S,
    /// Annotation-overlap suppression threshold (strict `>` drops).
    pub theta2: S,
}

#[derive(Debug, thiserror::Error)]
pub enum CoGenError {
    #[error("{0}")]
    InvalidConfig(String),
}

impl<S: Scalar> CoGenConfig<S> {
    pub fn validate(&self) -> Result<(), CoGenError> {
        let unit = |name: &str, v: S| {
            if v >= S::zero() && v <= S::one() {
                Ok(())
            } else {
                Err(CoGenError::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {v}"
                )))
            }
        };
        unit("theta1", self.theta1)?;
        unit("theta2", self.theta2)?;
        if self.tau >= S::zero() && self.tau < S::lit(2.0) {
            Ok(())
        } else {
            Err(CoGenError::InvalidConfig(format!(
                "tau must lie in [0, 2), got {}",
                self.tau
            )))
        }
    }
}

/// Pseudo-labels mined from one branch's detections.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet<S> {
    pub labels: Vec<Detection<S>>,
    pub source: Branch,
}

impl<S> PseudoLabelSet<S> {
    pub fn empty(source: Branch) -> Self {
        Self {
            labels: Vec::new(),
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Runs the three-stage pipeline on one branch's raw detections.
///
/// `annotations` is the image's kept (sparse) annotation set. The output
/// preserves NMS order (descending score). A NaN score never passes the
/// score gate.
pub fn co_generate<S: Scalar>(
    detections: &[Detection<S>],
    annotations: &LabelSet<S>,
    cfg: &CoGenConfig<S>,
    source: Branch,
) -> PseudoLabelSet<S> {
    let confident: Vec<Detection<S>> = detections
        .iter()
        .copied()
        .filter(|d| d.score >= cfg.tau)
        .collect();
    let deduped = nms(&confident, cfg.theta1);
    let labels = deduped
        .into_iter()
        .filter(|d| {
            annotations
                .instances
                .iter()
                .all(|a| iou(&d.bbox, &a.bbox) <= cfg.theta2)
        })
        .collect();
    PseudoLabelSet { labels, source }
}

/// Provenance of one entry in a merged supervision set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelOrigin {
    /// Came from the dataset's kept annotations.
    Annotated,
    /// Mined from the named branch this iteration.
    Pseudo(Branch),
}

/// The supervision set one branch trains against: the image's kept
/// annotations followed by the other branch's pseudo-labels, with per-entry
/// provenance and (for pseudo-labels) the mining score.
#[derive(Clone, Debug, PartialEq)]
pub struct CompleteLabelSet<S> {
    pub image_id: u64,
    pub instances: Vec<GtInstance<S>>,
    pub origins: Vec<LabelOrigin>,
    pub scores: Vec<Option<S>>,
}

impl<S> CompleteLabelSet<S> {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// The instances as a plain slice, for assignment and losses.
    pub fn as_instances(&self) -> &[GtInstance<S>] {
        &self.instances
    }

    pub fn num_pseudo(&self) -> usize {
        self.origins
            .iter()
            .filter(|o| matches!(o, LabelOrigin::Pseudo(_)))
            .count()
    }
}

/// Merges kept annotations with the opposite branch's pseudo-labels.
///
/// Annotations come first, unchanged and in their stored order; pseudo-labels
/// follow in pipeline order with minted instance ids `PSEUDO_ID_BASE + index`.
pub fn merge<S: Scalar>(
    pseudo: &PseudoLabelSet<S>,
    annotations: &LabelSet<S>,
) -> CompleteLabelSet<S> {
    let mut instances = Vec::with_capacity(annotations.instances.len() + pseudo.labels.len());
    let mut origins = Vec::with_capacity(instances.capacity());
    let mut scores = Vec::with_capacity(instances.capacity());
    for inst in &annotations.instances {
        instances.push(*inst);
        origins.push(LabelOrigin::Annotated);
        scores.push(None);
    }
    for (idx, det) in pseudo.labels.iter().enumerate() {
        instances.push(GtInstance {
            instance_id: PSEUDO_ID_BASE + idx as u64,
            image_id: annotations.image_id,
            class_id: det.class_id,
            bbox: det.bbox,
        });
        origins.push(LabelOrigin::Pseudo(pseudo.source));
        scores.push(Some(det.score));
    }
    CompleteLabelSet {
        image_id: annotations.image_id,
        instances,
        origins,
        scores,
    }
}
