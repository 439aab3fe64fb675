//! Detection quality metrics: interpolated average precision over IoU
//! thresholds, per category and per object-size bucket.
//!
//! The protocol mirrors the established detection benchmark recipe at desk
//! scale:
//!
//! - detections are capped per image (across classes, by score), then pooled
//!   per category and matched greedily in descending score order — each
//!   detection takes the unmatched annotation with the highest IoU at or
//!   above the threshold, ties resolving to the lowest annotation index;
//! - precision is interpolated at 101 recall points after taking the
//!   running maximum from the right;
//! - the headline score averages AP over the IoU thresholds
//!   `0.50, 0.55, ..., 0.95` and all categories;
//! - size buckets re-run the match with out-of-range annotations marked
//!   "ignore": a detection matched to an ignored annotation is dropped from
//!   scoring, and an unmatched detection whose own area is out of range is
//!   dropped rather than counted as a false positive.
//!
//! A category with no annotations and no detections has no defined AP and is
//! excluded from means; with detections but no annotations its AP is 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::SparseDataset;
use crate::geometry::{iou, sort_by_score_desc, BBox, Detection};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("detections reference unknown image id {0}")]
    UnknownImage(u64),
    #[error("detection class id {class_id} out of range for {num_classes} categories")]
    BadClass { class_id: usize, num_classes: usize },
}

/// Evaluation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU thresholds an AP is computed at; the headline `ap` averages over
    /// all of them.
    pub iou_thresholds: Vec<f64>,
    /// Per-image detection cap, applied across classes by score before any
    /// matching.
    pub max_dets_per_image: usize,
    /// Upper area bound (exclusive) of the "small" bucket, in cells^2.
    pub area_small: f64,
    /// Upper area bound (exclusive) of the "medium" bucket, in cells^2.
    pub area_medium: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            max_dets_per_image: 100,
            area_small: 4.0,
            area_medium: 16.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.iou_thresholds.is_empty() {
            return Err(EvalError::InvalidConfig(
                "iou_thresholds must not be empty".into(),
            ));
        }
        for &t in &self.iou_thresholds {
            if !(t > 0.0 && t <= 1.0) {
                return Err(EvalError::InvalidConfig(format!(
                    "IoU threshold {t} outside (0, 1]"
                )));
            }
        }
        if self.max_dets_per_image == 0 {
            return Err(EvalError::InvalidConfig(
                "max_dets_per_image must be positive".into(),
            ));
        }
        if !(self.area_small > 0.0 && self.area_medium > self.area_small) {
            return Err(EvalError::InvalidConfig(format!(
                "area buckets must satisfy 0 < small ({}) < medium ({})",
                self.area_small, self.area_medium
            )));
        }
        Ok(())
    }
}

/// Evaluation summary. All AP values are raw fractions in `[0, 1]`; `None`
/// marks an undefined average (nothing annotated and nothing detected in
/// that slice of the data).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean AP over all IoU thresholds and categories.
    pub ap: Option<f64>,
    /// Mean AP at IoU 0.50 (when that threshold is configured).
    pub ap50: Option<f64>,
    /// Mean AP at IoU 0.75 (when that threshold is configured).
    pub ap75: Option<f64>,
    /// Mean AP over annotations with area < `area_small`.
    pub ap_s: Option<f64>,
    /// Mean AP over annotations with area in `[area_small, area_medium)`.
    pub ap_m: Option<f64>,
    /// Mean AP over annotations with area >= `area_medium`.
    pub ap_l: Option<f64>,
    /// Mean AP over IoU thresholds, keyed by category id.
    pub per_category: BTreeMap<u32, Option<f64>>,
}

/// Greedy score-ordered matching of detections to ground-truth boxes.
///
/// Returns, aligned with the input detection order, the index of the matched
/// box (or `None`). Detections are processed in descending score order
/// (stable, NaN scores last); each takes the not-yet-matched box with the
/// highest IoU `>= iou_thr`, ties resolving to the lowest box index.
pub fn match_greedy<S: Scalar>(
    detections: &[Detection<S>],
    gts: &[BBox<S>],
    iou_thr: S,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    sort_by_score_desc(&mut order, |&i| detections[i].score);
    let mut matched_gt = vec![false; gts.len()];
    let mut result = vec![None; detections.len()];
    for det_idx in order {
        let det = &detections[det_idx];
        let mut best: Option<(S, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched_gt[g] {
                continue;
            }
            let v = iou(&det.bbox, gt);
            if v >= iou_thr && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, g));
            }
        }
        if let Some((_, g)) = best {
            matched_gt[g] = true;
            result[det_idx] = Some(g);
        }
    }
    result
}

/// 101-point interpolated average precision.
///
/// `scored` holds `(score, is_true_positive)` per counted detection;
/// `total_gt` is the number of counted annotations. Returns `None` when
/// there is nothing to score at all, `Some(0.0)` when annotations exist but
/// nothing was detected (or vice versa).
pub fn average_precision(scored: &[(f64, bool)], total_gt: usize) -> Option<f64> {
    if total_gt == 0 && scored.is_empty() {
        return None;
    }
    if total_gt == 0 || scored.is_empty() {
        return Some(0.0);
    }
    let mut ranked = scored.to_vec();
    sort_by_score_desc(&mut ranked, |r| r.0);
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (rank, (_, hit)) in ranked.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    // Precision envelope: running maximum from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        // First rank reaching recall r; envelope precision there.
        let p = recall
            .iter()
            .position(|&rec| rec >= r - 1e-12)
            .map_or(0.0, |i| precision[i]);
        total += p;
    }
    Some(total / 101.0)
}

struct FlatGt {
    image: u64,
    bbox: BBox<f64>,
    area: f64,
}

struct FlatDet {
    image: u64,
    bbox: BBox<f64>,
    score: f64,
    area: f64,
}

/// Area bounds `[lo, hi)` per bucket; the "all" bucket is unbounded.
#[derive(Clone, Copy)]
struct AreaRange {
    lo: f64,
    hi: f64,
}

impl AreaRange {
    fn contains(&self, area: f64) -> bool {
        area >= self.lo && area < self.hi
    }
}

/// One category / threshold / area-range evaluation under the ignore rules
/// described at module level. Returns the scored detections (score, is-TP)
/// plus the counted annotation total.
fn score_category(
    dets: &[FlatDet],
    order: &[usize],
    gts: &[FlatGt],
    iou_thr: f64,
    range: AreaRange,
) -> (Vec<(f64, bool)>, usize) {
    let gt_ignored: Vec<bool> = gts.iter().map(|g| !range.contains(g.area)).collect();
    let total_gt = gt_ignored.iter().filter(|ig| !**ig).count();
    let mut matched = vec![false; gts.len()];
    let mut scored = Vec::new();
    for &di in order {
        let det = &dets[di];
        // Prefer the best countable annotation; fall back to an ignored one
        // so a duplicate of an ignored object is dropped, not penalized.
        let mut best_real: Option<(f64, usize)> = None;
        let mut best_ignored: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] || gt.image != det.image {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v < iou_thr {
                continue;
            }
            let slot = if gt_ignored[g] {
                &mut best_ignored
            } else {
                &mut best_real
            };
            if slot.is_none_or(|(bv, _)| v > bv) {
                *slot = Some((v, g));
            }
        }
        if let Some((_, g)) = best_real {
            matched[g] = true;
            scored.push((det.score, true));
        } else if let Some((_, g)) = best_ignored {
            matched[g] = true; // consumed, but contributes nothing
        } else if range.contains(det.area) {
            scored.push((det.score, false));
        }
    }
    (scored, total_gt)
}

fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Evaluates per-image detections against the annotations stored in
/// `dataset` (use a fully annotated split; a sparsified set would score
/// against its kept annotations only).
///
/// `detections` maps image id to that image's detections; images without an
/// entry contribute annotations but no detections.
pub fn evaluate<S: Scalar>(
    detections: &BTreeMap<u64, Vec<Detection<S>>>,
    dataset: &SparseDataset<S>,
    cfg: &EvalConfig,
) -> Result<Metrics, EvalError> {
    cfg.validate()?;
    let num_classes = dataset.num_classes();
    for (&image_id, dets) in detections {
        if !dataset.kept.contains_key(&image_id) {
            return Err(EvalError::UnknownImage(image_id));
        }
        for d in dets {
            if d.class_id >= num_classes {
                return Err(EvalError::BadClass {
                    class_id: d.class_id,
                    num_classes,
                });
            }
        }
    }

    // Cap per image across classes, then split by category in f64.
    let mut gts_by_class: Vec<Vec<FlatGt>> = (0..num_classes).map(|_| Vec::new()).collect();
    let mut dets_by_class: Vec<Vec<FlatDet>> = (0..num_classes).map(|_| Vec::new()).collect();
    for (&image_id, labels) in &dataset.kept {
        for inst in &labels.instances {
            let bbox = BBox::new(
                inst.bbox.x_min.as_f64(),
                inst.bbox.y_min.as_f64(),
                inst.bbox.x_max.as_f64(),
                inst.bbox.y_max.as_f64(),
            );
            gts_by_class[inst.class_id].push(FlatGt {
                image: image_id,
                area: bbox.width() * bbox.height(),
                bbox,
            });
        }
        let mut image_dets: Vec<Detection<S>> = detections
            .get(&image_id)
            .map(|v| v.to_vec())
            .unwrap_or_default();
        sort_by_score_desc(&mut image_dets, |d| d.score);
        image_dets.truncate(cfg.max_dets_per_image);
        for d in image_dets {
            let bbox = BBox::new(
                d.bbox.x_min.as_f64(),
                d.bbox.y_min.as_f64(),
                d.bbox.x_max.as_f64(),
                d.bbox.y_max.as_f64(),
            );
            dets_by_class[d.class_id].push(FlatDet {
                image: image_id,
                area: bbox.width() * bbox.height(),
                bbox,
                score: d.score.as_f64(),
            });
        }
    }

    let all = AreaRange {
        lo: 0.0,
        hi: f64::INFINITY,
    };
    let small = AreaRange {
        lo: 0.0,
        hi: cfg.area_small,
    };
    let medium = AreaRange {
        lo: cfg.area_small,
        hi: cfg.area_medium,
    };
    let large = AreaRange {
        lo: cfg.area_medium,
        hi: f64::INFINITY,
    };

    let thresholds = &cfg.iou_thresholds;
    let mut per_cat_thr: Vec<Vec<Option<f64>>> = Vec::with_capacity(num_classes);
    let mut bucket_aps: [Vec<Option<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class_id in 0..num_classes {
        let dets = &dets_by_class[class_id];
        let gts = &gts_by_class[class_id];
        // Global score order once per category, shared by every threshold.
        let mut order: Vec<usize> = (0..dets.len()).collect();
        sort_by_score_desc(&mut order, |&i| dets[i].score);

        let mut aps = Vec::with_capacity(thresholds.len());
        for &thr in thresholds {
            let (scored, total_gt) = score_category(dets, &order, gts, thr, all);
            aps.push(average_precision(&scored, total_gt));
            for (bucket, range) in [small, medium, large].into_iter().enumerate() {
                let (scored, total_gt) = score_category(dets, &order, gts, thr, range);
                bucket_aps[bucket].push(average_precision(&scored, total_gt));
            }
        }
        per_cat_thr.push(aps);
    }

    let per_category: BTreeMap<u32, Option<f64>> = dataset
        .categories
        .iter()
        .enumerate()
        .map(|(class_id, cat)| (cat.id, mean_defined(per_cat_thr[class_id].iter().copied())))
        .collect();
    let at_threshold = |target: f64| -> Option<f64> {
        let idx = thresholds.iter().position(|t| (t - target).abs() < 1e-9)?;
        mean_defined(per_cat_thr.iter().map(|aps| aps[idx]))
    };
    Ok(Metrics {
        ap: mean_defined(per_cat_thr.iter().flatten().copied()),
        ap50: at_threshold(0.50),
        ap75: at_threshold(0.75),
        ap_s: mean_defined(bucket_aps[0].iter().copied()),
        ap_m: mean_defined(bucket_aps[1].iter().copied()),
        ap_l: mean_defined(bucket_aps[2].iter().copied()),
        per_category,
    })
}
