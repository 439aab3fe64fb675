//! Axis-aligned bounding-box arithmetic: areas, IoU, IoU matrices, and greedy
//! non-maximum suppression.
//!
//! Boxes use corner form (`x_min, y_min, x_max, y_max`) in continuous scene
//! coordinates — cell units for synthetic scenes, pixels for ingested
//! annotation files (the `[x, y, w, h]` form is converted at ingest). All
//! operations here are pure functions over immutable inputs.

use ndarray::Array2;

use crate::scalar::Scalar;

/// Axis-aligned bounding box in corner form.
///
/// A box is *valid* when `x_max >= x_min`, `y_max >= y_min`, and all four
/// coordinates are finite. Zero-extent (degenerate) boxes are valid and have
/// area zero; the IoU of two degenerate boxes is defined as zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox<S> {
    pub x_min: S,
    pub y_min: S,
    pub x_max: S,
    pub y_max: S,
}

impl<S: Scalar> BBox<S> {
    /// Builds a box from its corners. Validity is asserted in debug builds;
    /// boundary ingest (dataset loading) performs checked validation with
    /// context instead.
    pub fn new(x_min: S, y_min: S, x_max: S, y_max: S) -> Self {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        debug_assert!(b.is_valid(), "invalid box corners: {b:?}");
        b
    }

    /// Converts from `[x, y, w, h]` (top-left corner plus extent).
    pub fn from_xywh(x: S, y: S, w: S, h: S) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    /// Converts to `[x, y, w, h]`.
    pub fn to_xywh(&self) -> [S; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn is_valid(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && self.x_max >= self.x_min
            && self.y_max >= self.y_min
    }

    pub fn width(&self) -> S {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> S {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (S, S) {
        let half = S::lit(0.5);
        (
            (self.x_min + self.x_max) * half,
            (self.y_min + self.y_max) * half,
        )
    }
}

/// Box area; zero for degenerate boxes.
pub fn area<S: Scalar>(b: &BBox<S>) -> S {
    b.width() * b.height()
}

fn intersection_area<S: Scalar>(a: &BBox<S>, b: &BBox<S>) -> S {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w > S::zero() && h > S::zero() {
        w * h
    } else {
        S::zero()
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
///
/// Defined as 0 when the union has zero area (two degenerate boxes), avoiding
/// a 0/0.
pub fn iou<S: Scalar>(a: &BBox<S>, b: &BBox<S>) -> S {
    let inter = intersection_area(a, b);
    let union = area(a) + area(b) - inter;
    if union > S::zero() {
        inter / union
    } else {
        S::zero()
    }
}

/// Pairwise IoU matrix: entry `(i, j)` is `iou(a[i], b[j])`. Empty inputs
/// yield a matrix with a zero dimension.
pub fn iou_matrix<S: Scalar>(a: &[BBox<S>], b: &[BBox<S>]) -> Array2<S> {
    let mut m = Array2::zeros((a.len(), b.len()));
    for (i, ba) in a.iter().enumerate() {
        for (j, bb) in b.iter().enumerate() {
            m[(i, j)] = iou(ba, bb);
        }
    }
    m
}

/// A classified, scored box — the currency of every pipeline stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection<S> {
    pub bbox: BBox<S>,
    /// Category index in `[0, K)`.
    pub class_id: usize,
    /// Confidence in `[0, 1]`.
    pub score: S,
}

/// Descending score order with ties broken by input order (stable sort) and
/// NaN scores sorted last. Shared by NMS and the evaluator so every ranking
/// in the pipeline agrees on tie-breaks.
pub(crate) fn sort_by_score_desc<S: Scalar, T>(items: &mut [T], score: impl Fn(&T) -> S) {
    items.sort_by(|a, b| {
        let (sa, sb) = (score(a), score(b));
        match (sa.is_nan(), sb.is_nan()) {
            (true, true) => std::cmp::Ordering::Equal,
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            (false, false) => sb.partial_cmp(&sa).expect("non-NaN scores compare"),
        }
    });
}

/// Greedy class-agnostic non-maximum suppression.
///
/// Repeatedly keeps the highest-scored remaining detection and removes every
/// remaining detection whose IoU with it *strictly exceeds* `thr`. The kept
/// set preserves descending score order; score ties are broken by input order
/// (earlier wins). At `thr = 1.0` nothing can be suppressed, so the result is
/// all detections sorted by score.
pub fn nms<S: Scalar>(dets: &[Detection<S>], thr: S) -> Vec<Detection<S>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    sort_by_score_desc(&mut order, |&i| dets[i].score);

    let mut kept: Vec<Detection<S>> = Vec::new();
    let mut suppressed = vec![false; dets.len()];
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) > thr {
                suppressed[j] = true;
            }
        }
    }
    kept
}
