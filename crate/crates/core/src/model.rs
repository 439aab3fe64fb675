//! Toy dense anchor-based detector with analytic gradients.
//!
//! The network is a backbone/head pair over the cell grid:
//!
//! - backbone: per-cell linear channel mixer `C -> D` plus bias, followed by
//!   a rectifier;
//! - head: per-cell linear map `D -> A * (K + 4)` plus bias, split per anchor
//!   shape into `K` classification logits and 4 regression offsets.
//!
//! Both stages are pointwise (no spatial mixing), which keeps every gradient
//! desk-verifiable while preserving the backbone/head parameter split the
//! trainer updates. Anchors are laid out cell-major, shape-minor: anchor
//! `n = (i * grid_w + j) * A + a` sits at cell `(i, j)` with shape `a`, and
//! the head output columns for shape `a` are `[a*(K+4), a*(K+4)+K)` for
//! logits followed by `(dx, dy, dw, dh)`.
//!
//! Classification is per-class sigmoid (multi-label binary) under focal
//! loss; regression offsets use the standard anchor parameterization
//! `dx = (cx_g - cx_a) / w_a`, `dw = ln(w_g / w_a)` (y/h analogous).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::GtInstance;
use crate::geometry::{iou, BBox, Detection};
use crate::scalar::Scalar;
use crate::scene::FeatureMap;

/// Initial foreground probability encoded into the classification bias, so
/// an untrained model predicts background almost everywhere and the focal
/// loss does not explode on the first iterations.
pub const INIT_FOREGROUND_PRIOR: f64 = 0.01;

/// Weight initialization standard deviation.
pub const INIT_WEIGHT_STD: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("degenerate box has no offset encoding")]
    DegenerateBox,
    #[error("non-finite regression offsets")]
    NonFiniteOffsets,
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

// ---------------------------------------------------------------------------
// Anchors
// ---------------------------------------------------------------------------

/// One anchor box per (cell, shape) pair, centered on cell centers.
///
/// Order is cell-major (row-major cells), shape-minor; anchors near the
/// border may extend past the grid and are not clipped.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid<S> {
    pub grid_h: usize,
    pub grid_w: usize,
    /// `(width, height)` per anchor shape, in cells.
    pub shapes: Vec<(S, S)>,
    pub boxes: Vec<BBox<S>>,
}

impl<S: Scalar> AnchorGrid<S> {
    /// Builds the grid: for each cell `(i, j)` and shape `(w, h)`, an anchor
    /// of that extent centered at `(j + 0.5, i + 0.5)`.
    pub fn build(grid_h: usize, grid_w: usize, shapes: &[(S, S)]) -> Self {
        let half = S::lit(0.5);
        let mut boxes = Vec::with_capacity(grid_h * grid_w * shapes.len());
        for i in 0..grid_h {
            for j in 0..grid_w {
                let cx = S::from_count(j) + half;
                let cy = S::from_count(i) + half;
                for &(w, h) in shapes {
                    boxes.push(BBox::new(
                        cx - w * half,
                        cy - h * half,
                        cx + w * half,
                        cy + h * half,
                    ));
                }
            }
        }
        Self {
            grid_h,
            grid_w,
            shapes: shapes.to_vec(),
            boxes,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_shapes(&self) -> usize {
        self.shapes.len()
    }
}

// ---------------------------------------------------------------------------
// Parameters and forward pass
// ---------------------------------------------------------------------------

/// Static dimensions of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Input channels `C`.
    pub channels: usize,
    /// Backbone width `D`.
    pub hidden: usize,
    /// Class count `K`.
    pub num_classes: usize,
    /// Anchor shapes per cell `A`.
    pub num_shapes: usize,
}

impl ModelDims {
    pub fn head_out(&self) -> usize {
        self.num_shapes * (self.num_classes + 4)
    }
}

/// The single shared parameter store: backbone mixer `w_b`/`b_b` and head
/// map `w_h`/`b_h`. Both Siamese views read the same value and one fused
/// update writes it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub dims: ModelDims,
    /// `D x C`.
    pub w_b: Array2<S>,
    /// `D`.
    pub b_b: Array1<S>,
    /// `A*(K+4) x D`.
    pub w_h: Array2<S>,
    /// `A*(K+4)`.
    pub b_h: Array1<S>,
}

impl<S: Scalar> ModelParams<S> {
    /// Random initialization: weights `Normal(0, INIT_WEIGHT_STD)`, biases
    /// zero except classification biases, which are set so the initial
    /// foreground probability is [`INIT_FOREGROUND_PRIOR`].
    ///
    /// Weight draws happen row-major through `w_b` then `w_h`.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        let mut normal = |_: ()| {
            let z: f64 = StandardNormal.sample(rng);
            S::lit(z * INIT_WEIGHT_STD)
        };
        let mut w_b = Array2::zeros((dims.hidden, dims.channels));
        for v in w_b.iter_mut() {
            *v = normal(());
        }
        let mut w_h = Array2::zeros((dims.head_out(), dims.hidden));
        for v in w_h.iter_mut() {
            *v = normal(());
        }
        let b_b = Array1::zeros(dims.hidden);
        let mut b_h = Array1::zeros(dims.head_out());
        let prior_logit = S::lit((INIT_FOREGROUND_PRIOR / (1.0 - INIT_FOREGROUND_PRIOR)).ln());
        let block = dims.num_classes + 4;
        for a in 0..dims.num_shapes {
            for k in 0..dims.num_classes {
                b_h[a * block + k] = prior_logit;
            }
        }
        Self {
            dims,
            w_b,
            b_b,
            w_h,
            b_h,
        }
    }

    /// All-zero parameters (test fixtures).
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            w_b: Array2::zeros((dims.hidden, dims.channels)),
            b_b: Array1::zeros(dims.hidden),
            w_h: Array2::zeros((dims.head_out(), dims.hidden)),
            b_h: Array1::zeros(dims.head_out()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w_b.iter().all(|v| v.is_finite())
            && self.b_b.iter().all(|v| v.is_finite())
            && self.w_h.iter().all(|v| v.is_finite())
            && self.b_h.iter().all(|v| v.is_finite())
    }
}

/// Dense per-anchor outputs of one view, flattened over the anchor order
/// documented on [`AnchorGrid`]: `cls_logits` is `N x K` and `reg_offsets`
/// is `N x 4` with `N = grid_h * grid_w * A`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensePrediction<S> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_shapes: usize,
    pub cls_logits: Array2<S>,
    pub reg_offsets: Array2<S>,
}

impl<S: Scalar> DensePrediction<S> {
    pub fn num_anchors(&self) -> usize {
        self.grid_h * self.grid_w * self.num_shapes
    }
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache<S> {
    /// `(H*W) x C` input matrix.
    pub x: Array2<S>,
    /// `(H*W) x D` post-rectifier features; `> 0` doubles as the rectifier
    /// mask (subgradient 0 at exactly 0).
    pub features: Array2<S>,
}

fn input_matrix<S: Scalar>(fm: &FeatureMap<S>) -> Array2<S> {
    let (h, w, c) = fm.values.dim();
    Array2::from_shape_vec((h * w, c), fm.values.iter().copied().collect())
        .expect("row-major tensor reshapes to (cells, channels)")
}

/// Forward pass returning the cache needed by [`backward`].
pub fn forward_cached<S: Scalar>(
    params: &ModelParams<S>,
    fm: &FeatureMap<S>,
) -> Result<(DensePrediction<S>, ForwardCache<S>), ModelError> {
    let (h, w, c) = fm.values.dim();
    let dims = params.dims;
    if c != dims.channels {
        return Err(ModelError::Dimension(format!(
            "feature map has {c} channels, model expects {}",
            dims.channels
        )));
    }
    let x = input_matrix(fm);
    let pre = x.dot(&params.w_b.t()) + &params.b_b;
    let features = pre.mapv(|v| v.max(S::zero()));
    let out = features.dot(&params.w_h.t()) + &params.b_h;

    let (k, a) = (dims.num_classes, dims.num_shapes);
    let block = k + 4;
    let n = h * w * a;
    let mut cls_logits = Array2::zeros((n, k));
    let mut reg_offsets = Array2::zeros((n, 4));
    for cell in 0..h * w {
        for shape in 0..a {
            let anchor = cell * a + shape;
            for kk in 0..k {
                cls_logits[(anchor, kk)] = out[(cell, shape * block + kk)];
            }
            for t in 0..4 {
                reg_offsets[(anchor, t)] = out[(cell, shape * block + k + t)];
            }
        }
    }
    Ok((
        DensePrediction {
            grid_h: h,
            grid_w: w,
            num_shapes: a,
            cls_logits,
            reg_offsets,
        },
        ForwardCache { x, features },
    ))
}

/// Forward pass without cache.
pub fn forward<S: Scalar>(
    params: &ModelParams<S>,
    fm: &FeatureMap<S>,
) -> Result<DensePrediction<S>, ModelError> {
    forward_cached(params, fm).map(|(pred, _)| pred)
}

/// Parameter-space gradients (also reused as the momentum velocity buffer).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<S> {
    pub w_b: Array2<S>,
    pub b_b: Array1<S>,
    pub w_h: Array2<S>,
    pub b_h: Array1<S>,
}

impl<S: Scalar> ParamGrads<S> {
    pub fn zeros_like(params: &ModelParams<S>) -> Self {
        Self {
            w_b: Array2::zeros(params.w_b.dim()),
            b_b: Array1::zeros(params.b_b.len()),
            w_h: Array2::zeros(params.w_h.dim()),
            b_h: Array1::zeros(params.b_h.len()),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.w_b.zip_mut_with(&other.w_b, |a, b| *a += *b);
        self.b_b.zip_mut_with(&other.b_b, |a, b| *a += *b);
        self.w_h.zip_mut_with(&other.w_h, |a, b| *a += *b);
        self.b_h.zip_mut_with(&other.b_h, |a, b| *a += *b);
    }

    pub fn scale(&mut self, factor: S) {
        self.w_b.mapv_inplace(|v| v * factor);
        self.b_b.mapv_inplace(|v| v * factor);
        self.w_h.mapv_inplace(|v| v * factor);
        self.b_h.mapv_inplace(|v| v * factor);
    }
}

/// Exact chain rule from output-space gradients (`d_cls`: `N x K`, `d_reg`:
/// `N x 4`) to parameter gradients, using the rectifier subgradient 0 at 0.
pub fn backward<S: Scalar>(
    params: &ModelParams<S>,
    cache: &ForwardCache<S>,
    d_cls: &Array2<S>,
    d_reg: &Array2<S>,
) -> ParamGrads<S> {
    let dims = params.dims;
    let (k, a) = (dims.num_classes, dims.num_shapes);
    let block = k + 4;
    let cells = cache.features.dim().0;

    // Reassemble per-cell output gradients from the per-anchor views.
    let mut d_out: Array2<S> = Array2::zeros((cells, dims.head_out()));
    for cell in 0..cells {
        for shape in 0..a {
            let anchor = cell * a + shape;
            for kk in 0..k {
                d_out[(cell, shape * block + kk)] = d_cls[(anchor, kk)];
            }
            for t in 0..4 {
                d_out[(cell, shape * block + k + t)] = d_reg[(anchor, t)];
            }
        }
    }

    let w_h = d_out.t().dot(&cache.features);
    let b_h = d_out.sum_axis(ndarray::Axis(0));
    let mut d_pre = d_out.dot(&params.w_h);
    d_pre.zip_mut_with(&cache.features, |g, f| {
        if *f <= S::zero() {
            *g = S::zero();
        }
    });
    let w_b = d_pre.t().dot(&cache.x);
    let b_b = d_pre.sum_axis(ndarray::Axis(0));
    ParamGrads { w_b, b_b, w_h, b_h }
}

/// SGD with momentum: `v <- mu * v + g`, `p <- p - eta * v`.
pub fn sgd_step<S: Scalar>(
    params: &mut ModelParams<S>,
    velocity: &mut ParamGrads<S>,
    grads: &ParamGrads<S>,
    eta: S,
    mu: S,
) {
    fn update2<S: Scalar>(p: &mut Array2<S>, v: &mut Array2<S>, g: &Array2<S>, eta: S, mu: S) {
        v.zip_mut_with(g, |v, g| *v = mu * *v + *g);
        p.zip_mut_with(v, |p, v| *p -= eta * *v);
    }
    fn update1<S: Scalar>(p: &mut Array1<S>, v: &mut Array1<S>, g: &Array1<S>, eta: S, mu: S) {
        v.zip_mut_with(g, |v, g| *v = mu * *v + *g);
        p.zip_mut_with(v, |p, v| *p -= eta * *v);
    }
    update2(&mut params.w_b, &mut velocity.w_b, &grads.w_b, eta, mu);
    update1(&mut params.b_b, &mut velocity.b_b, &grads.b_b, eta, mu);
    update2(&mut params.w_h, &mut velocity.w_h, &grads.w_h, eta, mu);
    update1(&mut params.b_h, &mut velocity.b_h, &grads.b_h, eta, mu);
}

// ---------------------------------------------------------------------------
// Box offset parameterization
// ---------------------------------------------------------------------------

/// Encodes a target box relative to an anchor as `(dx, dy, dw, dh)`. Errors
/// when either box is degenerate (a zero extent has no log-space encoding).
pub fn encode<S: Scalar>(anchor: &BBox<S>, gt: &BBox<S>) -> Result<[S; 4], ModelError> {
    let (wa, ha) = (anchor.width(), anchor.height());
    let (wg, hg) = (gt.width(), gt.height());
    if !(wa > S::zero() && ha > S::zero() && wg > S::zero() && hg > S::zero()) {
        return Err(ModelError::DegenerateBox);
    }
    let (cxa, cya) = anchor.center();
    let (cxg, cyg) = gt.center();
    Ok([
        (cxg - cxa) / wa,
        (cyg - cya) / ha,
        (wg / wa).ln(),
        (hg / ha).ln(),
    ])
}

/// Decodes offsets relative to an anchor, clipping the result to the grid
/// `[0, grid_w] x [0, grid_h]`. Errors on non-finite offsets.
pub fn decode<S: Scalar>(
    anchor: &BBox<S>,
    offsets: [S; 4],
    grid_w: S,
    grid_h: S,
) -> Result<BBox<S>, ModelError> {
    if offsets.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteOffsets);
    }
    let [dx, dy, dw, dh] = offsets;
    let (wa, ha) = (anchor.width(), anchor.height());
    let (cxa, cya) = anchor.center();
    let half = S::lit(0.5);
    let cx = cxa + dx * wa;
    let cy = cya + dy * ha;
    let w = wa * dw.exp();
    let h = ha * dh.exp();
    let clip = |v: S, hi: S| v.max(S::zero()).min(hi);
    Ok(BBox::new(
        clip(cx - w * half, grid_w),
        clip(cy - h * half, grid_h),
        clip(cx + w * half, grid_w),
        clip(cy + h * half, grid_h),
    ))
}

// ---------------------------------------------------------------------------
// Anchor assignment
// ---------------------------------------------------------------------------

/// Supervision role of one anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorAssignment {
    /// Index into the supervising label list.
    Positive(usize),
    Negative,
    Ignore,
}

/// Max-IoU assignment with per-label forcing.
///
/// Per anchor: max IoU over labels `>= pos_thr` makes it positive for the
/// argmax label (IoU ties to the lowest label index), `< neg_thr` makes it
/// negative, anything between is ignored. Then every label's best-IoU anchor
/// (ties to the lowest anchor index) is forced positive for it, provided
/// that best IoU is strictly positive — so no non-degenerate label goes
/// unmatched. Forcing is applied in label order and overwrites, so when two
/// labels share a best anchor the later label wins.
pub fn assign<S: Scalar>(
    anchors: &AnchorGrid<S>,
    labels: &[GtInstance<S>],
    pos_thr: S,
    neg_thr: S,
) -> Vec<AnchorAssignment> {
    debug_assert!(pos_thr >= neg_thr, "pos_thr must be >= neg_thr");
    if labels.is_empty() {
        return vec![AnchorAssignment::Negative; anchors.len()];
    }
    let mut out = Vec::with_capacity(anchors.len());
    let mut best_per_label: Vec<(S, usize)> = vec![(S::zero(), usize::MAX); labels.len()];
    for (n, anchor) in anchors.boxes.iter().enumerate() {
        let mut best = S::zero();
        let mut best_g = 0;
        for (g, inst) in labels.iter().enumerate() {
            let v = iou(anchor, &inst.bbox);
            if v > best {
                best = v;
                best_g = g;
            }
            let (label_best, label_anchor) = best_per_label[g];
            if v > label_best || (v == label_best && v > S::zero() && n < label_anchor) {
                best_per_label[g] = (v, n);
            }
        }
        out.push(if best >= pos_thr {
            AnchorAssignment::Positive(best_g)
        } else if best < neg_thr {
            AnchorAssignment::Negative
        } else {
            AnchorAssignment::Ignore
        });
    }
    for (g, &(best, anchor)) in best_per_label.iter().enumerate() {
        if best > S::zero() {
            out[anchor] = AnchorAssignment::Positive(g);
        }
    }
    out
}

fn count_positives(asg: &[AnchorAssignment]) -> usize {
    asg.iter()
        .filter(|a| matches!(a, AnchorAssignment::Positive(_)))
        .count()
}

fn positive_norm<S: Scalar>(asg: &[AnchorAssignment]) -> S {
    S::from_count(count_positives(asg).max(1))
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-class binary focal loss over sigmoid probabilities.
///
/// Positive anchors target one-hot at their assigned label's class, negative
/// anchors target all-zero, ignored anchors contribute nothing. Loss and
/// gradient are normalized by `max(1, #positive anchors)`.
///
/// Per logit `x` with `p = sigmoid(x)`: the target-1 term is
/// `-alpha * (1-p)^gamma * ln p` and the target-0 term is
/// `-(1-alpha) * p^gamma * ln(1-p)`; gradients are the closed forms of their
/// derivatives with respect to `x`.
pub fn focal_loss<S: Scalar>(
    pred: &DensePrediction<S>,
    asg: &[AnchorAssignment],
    labels: &[GtInstance<S>],
    alpha: S,
    gamma: S,
) -> (S, Array2<S>) {
    let (n, k) = pred.cls_logits.dim();
    debug_assert_eq!(n, asg.len());
    let norm = positive_norm::<S>(asg);
    let mut grad = Array2::zeros((n, k));
    let mut loss = S::zero();
    for (row, a) in asg.iter().enumerate() {
        let target_class = match a {
            AnchorAssignment::Ignore => continue,
            AnchorAssignment::Negative => None,
            AnchorAssignment::Positive(g) => Some(labels[*g].class_id),
        };
        for kk in 0..k {
            let x = pred.cls_logits[(row, kk)];
            let p = sigmoid(x);
            let one_m_p = sigmoid(-x);
            let ln_p = -softplus(-x);
            let ln_1mp = -softplus(x);
            let (term, dterm) = if target_class == Some(kk) {
                (
                    -alpha * one_m_p.powf(gamma) * ln_p,
                    alpha * one_m_p.powf(gamma) * (gamma * p * ln_p - one_m_p),
                )
            } else {
                (
                    -(S::one() - alpha) * p.powf(gamma) * ln_1mp,
                    (S::one() - alpha) * p.powf(gamma) * (p - gamma * one_m_p * ln_1mp),
                )
            };
            loss += term;
            grad[(row, kk)] = dterm / norm;
        }
    }
    (loss / norm, grad)
}

/// Smooth-L1 regression loss over positive anchors.
///
/// Per coordinate residual `d = predicted_offset - encoded_target`:
/// `0.5 d^2 / beta` when `|d| < beta`, else `|d| - 0.5 beta`. Normalized by
/// `max(1, #positive anchors)`.
pub fn smooth_l1_loss<S: Scalar>(
    pred: &DensePrediction<S>,
    asg: &[AnchorAssignment],
    anchors: &AnchorGrid<S>,
    labels: &[GtInstance<S>],
    beta: S,
) -> (S, Array2<S>) {
    debug_assert!(beta > S::zero());
    let n = pred.reg_offsets.dim().0;
    debug_assert_eq!(n, asg.len());
    let norm = positive_norm::<S>(asg);
    let mut grad = Array2::zeros((n, 4));
    let mut loss = S::zero();
    let half = S::lit(0.5);
    for (row, a) in asg.iter().enumerate() {
        let AnchorAssignment::Positive(g) = a else {
            continue;
        };
        // Positive anchors overlap their label (IoU > 0), so both boxes are
        // non-degenerate and encoding cannot fail.
        let target = encode(&anchors.boxes[row], &labels[*g].bbox)
            .expect("positive anchor has non-degenerate target");
        for t in 0..4 {
            let d = pred.reg_offsets[(row, t)] - target[t];
            let (term, dterm) = if d.abs() < beta {
                (half * d * d / beta, d / beta)
            } else {
                (d.abs() - half * beta, d.signum())
            };
            loss += term;
            grad[(row, t)] = dterm / norm;
        }
    }
    (loss / norm, grad)
}

/// IoU regression loss over positive anchors: `1 - IoU(decoded, target)`.
///
/// The gradient chains through the decode parameterization and the grid
/// clipping (subgradient 0 where a corner is clipped), and is 0 where the
/// decoded box does not overlap its target. A decode failure (non-finite
/// offsets mid-divergence) contributes a NaN loss term instead of a panic so
/// the trainer's divergence detection can catch it.
pub fn iou_reg_loss<S: Scalar>(
    pred: &DensePrediction<S>,
    asg: &[AnchorAssignment],
    anchors: &AnchorGrid<S>,
    labels: &[GtInstance<S>],
    grid_w: S,
    grid_h: S,
) -> (S, Array2<S>) {
    let n = pred.reg_offsets.dim().0;
    debug_assert_eq!(n, asg.len());
    let norm = positive_norm::<S>(asg);
    let mut grad = Array2::zeros((n, 4));
    let mut loss = S::zero();
    let half = S::lit(0.5);
    for (row, a) in asg.iter().enumerate() {
        let AnchorAssignment::Positive(g) = a else {
            continue;
        };
        let anchor = &anchors.boxes[row];
        let offsets = [
            pred.reg_offsets[(row, 0)],
            pred.reg_offsets[(row, 1)],
            pred.reg_offsets[(row, 2)],
            pred.reg_offsets[(row, 3)],
        ];
        if offsets.iter().any(|v| !v.is_finite()) {
            loss += S::nan();
            continue;
        }
        let [dx, dy, dw, dh] = offsets;
        let (wa, ha) = (anchor.width(), anchor.height());
        let (cxa, cya) = anchor.center();
        let cx = cxa + dx * wa;
        let cy = cya + dy * ha;
        let w = wa * dw.exp();
        let h = ha * dh.exp();
        let (x1, y1, x2, y2) = (cx - w * half, cy - h * half, cx + w * half, cy + h * half);
        let clip = |v: S, hi: S| v.max(S::zero()).min(hi);
        let (x1c, y1c) = (clip(x1, grid_w), clip(y1, grid_h));
        let (x2c, y2c) = (clip(x2, grid_w), clip(y2, grid_h));

        let gt = &labels[*g].bbox;
        let wi = x2c.min(gt.x_max) - x1c.max(gt.x_min);
        let hi = y2c.min(gt.y_max) - y1c.max(gt.y_min);
        let inter = if wi > S::zero() && hi > S::zero() {
            wi * hi
        } else {
            S::zero()
        };
        let ap = (x2c - x1c) * (y2c - y1c);
        let ag = (gt.x_max - gt.x_min) * (gt.y_max - gt.y_min);
        let union = ap + ag - inter;
        let iou_v = if union > S::zero() {
            inter / union
        } else {
            S::zero()
        };
        loss += S::one() - iou_v;

        if inter <= S::zero() || union <= S::zero() {
            // Non-overlap subgradient 0.
            continue;
        }
        // d(IoU)/dq = (I'(U + I) - I * Ap') / U^2 for each clipped corner q;
        // loss gradient is its negation.
        let d_i = [
            if x1c >= gt.x_min { -hi } else { S::zero() },
            if y1c >= gt.y_min { -wi } else { S::zero() },
            if x2c <= gt.x_max { hi } else { S::zero() },
            if y2c <= gt.y_max { wi } else { S::zero() },
        ];
        let (pw, ph) = (x2c - x1c, y2c - y1c);
        let d_ap = [-ph, -pw, ph, pw];
        let u2 = union * union;
        let mut d_loss = [S::zero(); 4]; // per clipped corner (x1, y1, x2, y2)
        for q in 0..4 {
            let d_iou = (d_i[q] * (union + inter) - inter * d_ap[q]) / u2;
            d_loss[q] = -d_iou;
        }
        // Clip subgradient: 0 when the raw corner lies outside (0, bound).
        let pass = |raw: S, hi: S| raw > S::zero() && raw < hi;
        let dx1 = if pass(x1, grid_w) {
            d_loss[0]
        } else {
            S::zero()
        };
        let dy1 = if pass(y1, grid_h) {
            d_loss[1]
        } else {
            S::zero()
        };
        let dx2 = if pass(x2, grid_w) {
            d_loss[2]
        } else {
            S::zero()
        };
        let dy2 = if pass(y2, grid_h) {
            d_loss[3]
        } else {
            S::zero()
        };
        // Chain into the offset parameterization.
        let d_cx = dx1 + dx2;
        let d_cy = dy1 + dy2;
        let d_w = (dx2 - dx1) * half;
        let d_h = (dy2 - dy1) * half;
        grad[(row, 0)] = d_cx * wa / norm;
        grad[(row, 1)] = d_cy * ha / norm;
        grad[(row, 2)] = d_w * w / norm;
        grad[(row, 3)] = d_h * h / norm;
    }
    (loss / norm, grad)
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Decodes every (anchor, class) pair with score `sigmoid(logit) >= floor`
/// into a detection. Anchors whose offsets fail to decode (non-finite) or
/// whose score is NaN yield no detection — inference never panics on a
/// diverged model. Output order: anchor-major, class-minor.
pub fn decode_detections<S: Scalar>(
    pred: &DensePrediction<S>,
    anchors: &AnchorGrid<S>,
    floor: S,
) -> Vec<Detection<S>> {
    let grid_w = S::from_count(pred.grid_w);
    let grid_h = S::from_count(pred.grid_h);
    let (n, k) = pred.cls_logits.dim();
    debug_assert_eq!(n, anchors.len());
    let mut dets = Vec::new();
    for row in 0..n {
        let offsets = [
            pred.reg_offsets[(row, 0)],
            pred.reg_offsets[(row, 1)],
            pred.reg_offsets[(row, 2)],
            pred.reg_offsets[(row, 3)],
        ];
        let decoded = match decode(&anchors.boxes[row], offsets, grid_w, grid_h) {
            Ok(b) => b,
            Err(_) => continue,
        };
        for kk in 0..k {
            let score = sigmoid(pred.cls_logits[(row, kk)]);
            if score >= floor && score.is_finite() {
                dets.push(Detection {
                    bbox: decoded,
                    class_id: kk,
                    score,
                });
            }
        }
    }
    dets
}

/// Full inference path: forward on the un-augmented view, sigmoid scores,
/// decode, drop detections below `score_thr`, then per-class NMS at
/// `nms_thr`. Detections are returned grouped by ascending class, each group
/// in descending score order.
pub fn predict<S: Scalar>(
    params: &ModelParams<S>,
    fm: &FeatureMap<S>,
    anchors: &AnchorGrid<S>,
    score_thr: S,
    nms_thr: S,
) -> Result<Vec<Detection<S>>, ModelError> {
    let pred = forward(params, fm)?;
    if pred.num_anchors() != anchors.len() {
        return Err(ModelError::Dimension(format!(
            "prediction covers {} anchors, grid has {}",
            pred.num_anchors(),
            anchors.len()
        )));
    }
    let dets = decode_detections(&pred, anchors, score_thr);
    let k = params.dims.num_classes;
    let mut kept = Vec::new();
    for class_id in 0..k {
        let class_dets: Vec<_> = dets
            .iter()
            .copied()
            .filter(|d| d.class_id == class_id)
            .collect();
        kept.extend(crate::geometry::nms(&class_dets, nms_thr));
    }
    Ok(kept)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"CMCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a binary little-endian checkpoint: header (magic `CMCK`, version,
/// `C`, `D`, `K`, `A` as u32), the `A` anchor shapes as `(w, h)` f32 pairs,
/// then `w_b`, `b_b`, `w_h`, `b_h` and the momentum buffers in the same
/// order, all row-major f32.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    params: &ModelParams<S>,
    velocity: &ParamGrads<S>,
    shapes: &[(S, S)],
) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dims = params.dims;
    if shapes.len() != dims.num_shapes {
        return Err(ModelError::Dimension(format!(
            "{} anchor shapes for a model with A={}",
            shapes.len(),
            dims.num_shapes
        )));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        CHECKPOINT_VERSION,
        dims.channels as u32,
        dims.hidden as u32,
        dims.num_classes as u32,
        dims.num_shapes as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &(w, h) in shapes {
        buf.extend_from_slice(&(w.as_f64() as f32).to_le_bytes());
        buf.extend_from_slice(&(h.as_f64() as f32).to_le_bytes());
    }
    let mut push = |it: &mut dyn Iterator<Item = S>| {
        for v in it {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    };
    push(&mut params.w_b.iter().copied());
    push(&mut params.b_b.iter().copied());
    push(&mut params.w_h.iter().copied());
    push(&mut params.b_h.iter().copied());
    push(&mut velocity.w_b.iter().copied());
    push(&mut velocity.b_b.iter().copied());
    push(&mut velocity.w_h.iter().copied());
    push(&mut velocity.b_h.iter().copied());
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)
}

/// Everything a checkpoint stores: parameters, momentum, and anchor shapes.
pub type CheckpointContents<S> = (ModelParams<S>, ParamGrads<S>, Vec<(S, S)>);

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<CheckpointContents<S>, ModelError> {
    let io_err = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let fmt_err = |message: String| ModelError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    if bytes.len() < 24 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fmt_err("not a checkpoint file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version}")));
    }
    let dims = ModelDims {
        channels: word(8) as usize,
        hidden: word(12) as usize,
        num_classes: word(16) as usize,
        num_shapes: word(20) as usize,
    };
    let tensor_count = 2
        * (dims.hidden * dims.channels
            + dims.hidden
            + dims.head_out() * dims.hidden
            + dims.head_out());
    let expected = 24 + 4 * (2 * dims.num_shapes + tensor_count);
    if bytes.len() != expected {
        return Err(fmt_err(format!(
            "checkpoint size {} does not match header (expected {expected})",
            bytes.len()
        )));
    }
    struct Reader<'a> {
        bytes: &'a [u8],
        cursor: usize,
    }
    impl Reader<'_> {
        fn next<S: Scalar>(&mut self) -> S {
            let v = f32::from_le_bytes(
                self.bytes[self.cursor..self.cursor + 4]
                    .try_into()
                    .expect("4 bytes"),
            );
            self.cursor += 4;
            S::lit(f64::from(v))
        }
        fn array2<S: Scalar>(&mut self, rows: usize, cols: usize) -> Array2<S> {
            Array2::from_shape_vec(
                (rows, cols),
                (0..rows * cols).map(|_| self.next()).collect(),
            )
            .expect("sized from header")
        }
        fn array1<S: Scalar>(&mut self, len: usize) -> Array1<S> {
            Array1::from_iter((0..len).map(|_| self.next()))
        }
    }
    let mut r = Reader {
        bytes: &bytes,
        cursor: 24,
    };
    let shapes: Vec<(S, S)> = (0..dims.num_shapes).map(|_| (r.next(), r.next())).collect();
    let w_b = r.array2(dims.hidden, dims.channels);
    let b_b = r.array1(dims.hidden);
    let w_h = r.array2(dims.head_out(), dims.hidden);
    let b_h = r.array1(dims.head_out());
    let v_w_b = r.array2(dims.hidden, dims.channels);
    let v_b_b = r.array1(dims.hidden);
    let v_w_h = r.array2(dims.head_out(), dims.hidden);
    let v_b_h = r.array1(dims.head_out());
    Ok((
        ModelParams {
            dims,
            w_b,
            b_b,
            w_h,
            b_h,
        },
        ParamGrads {
            w_b: v_w_b,
            b_b: v_b_b,
            w_h: v_w_h,
            b_h: v_b_h,
        },
        shapes,
    ))
}
