//! Synthetic detection scenes: generation, rendering to feature maps, and
//! the photometric augmentation that produces the second training view.
//!
//! A scene is a set of axis-aligned objects on an `H x W` cell grid. Each
//! class has a fixed unit-norm signature vector in channel space; rendering
//! sums i.i.d. Gaussian background noise with the signature of every object
//! covering a cell. Object extents and positions are whole cells, so the set
//! of covered cells is exact.
//!
//! Augmentations are photometric only (blur or per-channel affine jitter):
//! they never move boxes, so annotations stay valid across views by
//! construction.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3};
use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{GtInstance, LabelSet};
use crate::geometry::BBox;
use crate::scalar::Scalar;

/// Configuration of the synthetic scene distribution.
#[derive(Clone, Debug)]
pub struct SceneConfig<S> {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Feature channels `C`.
    pub channels: usize,
    /// Class count `K`.
    pub num_classes: usize,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of object extent in cells (width and height are drawn
    /// independently).
    pub object_size: (usize, usize),
    /// One unit-norm channel-space vector per class.
    pub signatures: Vec<Array1<S>>,
    /// Standard deviation of the i.i.d. background noise.
    pub noise_sigma: S,
}

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("scene config: {0}")]
    Config(String),
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl<S: Scalar> SceneConfig<S> {
    /// Builds a config with signatures drawn from `signature_seed`: K vectors
    /// of C standard normals, each normalized to unit length. With C somewhat
    /// larger than K the signatures come out close to orthogonal, so classes
    /// are separable yet not trivially so under noise.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        channels: usize,
        num_classes: usize,
        objects_per_image: (usize, usize),
        object_size: (usize, usize),
        noise_sigma: f64,
        signature_seed: u64,
    ) -> Result<Self, SceneError> {
        let cfg = Self {
            grid_h,
            grid_w,
            channels,
            num_classes,
            objects_per_image,
            object_size,
            signatures: class_signatures(num_classes, channels, signature_seed),
            noise_sigma: S::lit(noise_sigma),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let fail = |msg: String| Err(SceneError::Config(msg));
        if self.grid_h == 0 || self.grid_w == 0 {
            return fail("grid dimensions must be positive".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be at least 1".into());
        }
        if self.channels == 0 {
            return fail("channels must be at least 1".into());
        }
        if self.objects_per_image.0 > self.objects_per_image.1 {
            return fail(format!(
                "objects_per_image range [{}, {}] is inverted",
                self.objects_per_image.0, self.objects_per_image.1
            ));
        }
        if self.object_size.0 == 0 || self.object_size.0 > self.object_size.1 {
            return fail(format!(
                "object_size range [{}, {}] must be positive and ordered",
                self.object_size.0, self.object_size.1
            ));
        }
        if self.object_size.1 > self.grid_h.min(self.grid_w) {
            return fail(format!(
                "object_size max {} exceeds grid min dimension {}",
                self.object_size.1,
                self.grid_h.min(self.grid_w)
            ));
        }
        if self.signatures.len() != self.num_classes {
            return fail(format!(
                "expected {} signatures, got {}",
                self.num_classes,
                self.signatures.len()
            ));
        }
        if self.signatures.iter().any(|s| s.len() != self.channels) {
            return fail("signature dimension differs from channel count".into());
        }
        if !(self.noise_sigma >= S::zero() && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// K unit-norm class signatures of dimension C, deterministic in `seed`.
pub fn class_signatures<S: Scalar>(k: usize, c: usize, seed: u64) -> Vec<Array1<S>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            Array1::from_iter(raw.iter().map(|v| S::lit(v / norm)))
        })
        .collect()
}

/// The rendered `H x W x C` input tensor of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<S> {
    pub values: Array3<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn grid_h(&self) -> usize {
        self.values.dim().0
    }

    pub fn grid_w(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }
}

/// Draws one scene: an object count uniform in `objects_per_image`, then per
/// object a uniform class, independent uniform width/height in
/// `object_size`, and a uniform cell-aligned position fully inside the grid.
///
/// Instance ids are `id_start..` in draw order. Draw order per object:
/// class, width, height, x, y.
pub fn generate_scene<S: Scalar, R: Rng>(
    cfg: &SceneConfig<S>,
    image_id: u64,
    id_start: u64,
    rng: &mut R,
) -> LabelSet<S> {
    let count = rng.random_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
    let mut instances = Vec::with_capacity(count);
    for i in 0..count {
        let class_id = rng.random_range(0..cfg.num_classes);
        let w = rng.random_range(cfg.object_size.0..=cfg.object_size.1);
        let h = rng.random_range(cfg.object_size.0..=cfg.object_size.1);
        let x = rng.random_range(0..=cfg.grid_w - w);
        let y = rng.random_range(0..=cfg.grid_h - h);
        instances.push(GtInstance {
            instance_id: id_start + i as u64,
            image_id,
            class_id,
            bbox: BBox::from_xywh(
                S::from_count(x),
                S::from_count(y),
                S::from_count(w),
                S::from_count(h),
            ),
        });
    }
    LabelSet {
        image_id,
        instances,
    }
}

/// Renders a scene: background noise `Normal(0, noise_sigma)` per entry, plus
/// the class signature added to every cell whose center lies inside an
/// object's box (half-open test `min <= center < max`); overlapping objects
/// sum.
///
/// Noise is drawn cell-row-major with channels innermost, then objects are
/// stamped in instance order, so the result is deterministic given the rng
/// state.
pub fn render<S: Scalar, R: Rng>(
    scene: &LabelSet<S>,
    cfg: &SceneConfig<S>,
    rng: &mut R,
) -> FeatureMap<S> {
    let (h, w, c) = (cfg.grid_h, cfg.grid_w, cfg.channels);
    let mut values = Array3::zeros((h, w, c));
    if cfg.noise_sigma > S::zero() {
        for v in values.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = S::lit(z) * cfg.noise_sigma;
        }
    }
    let half = S::lit(0.5);
    for inst in &scene.instances {
        let sig = &cfg.signatures[inst.class_id];
        for i in 0..h {
            let cy = S::from_count(i) + half;
            if !(inst.bbox.y_min <= cy && cy < inst.bbox.y_max) {
                continue;
            }
            for j in 0..w {
                let cx = S::from_count(j) + half;
                if inst.bbox.x_min <= cx && cx < inst.bbox.x_max {
                    for ch in 0..c {
                        values[(i, j, ch)] += sig[ch];
                    }
                }
            }
        }
    }
    FeatureMap { values }
}

/// Photometric augmentation of the second view.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AugConfig {
    /// Identity; consumes no randomness.
    None,
    /// Spatial Gaussian blur with reflective boundary; consumes no
    /// randomness.
    Blur { kernel_sigma: f64 },
    /// Per-channel affine jitter `v' = gain_c * v + bias_c` with
    /// `gain_c ~ U[gain]`, `bias_c ~ U[bias]`, drawn per channel in channel
    /// order (gain then bias).
    Color { gain: (f64, f64), bias: (f64, f64) },
}

impl AugConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        match self {
            AugConfig::None => Ok(()),
            AugConfig::Blur { kernel_sigma } => {
                if kernel_sigma.is_finite() && *kernel_sigma >= 0.0 {
                    Ok(())
                } else {
                    Err(SceneError::Config(format!(
                        "blur kernel_sigma {kernel_sigma} must be finite and non-negative"
                    )))
                }
            }
            AugConfig::Color { gain, bias } => {
                if !(gain.0 <= gain.1 && gain.0 > 0.0 && gain.0 <= 1.0 && gain.1 >= 1.0) {
                    return Err(SceneError::Config(format!(
                        "color gain range [{}, {}] must be a positive interval containing 1",
                        gain.0, gain.1
                    )));
                }
                if bias.0 > bias.1 || !bias.0.is_finite() || !bias.1.is_finite() {
                    return Err(SceneError::Config(format!(
                        "color bias range [{}, {}] is invalid",
                        bias.0, bias.1
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Applies the configured photometric transform. Tensor shape is preserved
/// and box geometry is never touched.
pub fn augment<S: Scalar, R: Rng>(
    fm: &FeatureMap<S>,
    aug: &AugConfig,
    rng: &mut R,
) -> FeatureMap<S> {
    match aug {
        AugConfig::None => fm.clone(),
        AugConfig::Color { gain, bias } => {
            let (h, w, c) = fm.values.dim();
            let mut out = fm.values.clone();
            for ch in 0..c {
                let g = S::lit(rng.random_range(gain.0..=gain.1));
                let b = S::lit(rng.random_range(bias.0..=bias.1));
                for i in 0..h {
                    for j in 0..w {
                        out[(i, j, ch)] = g * out[(i, j, ch)] + b;
                    }
                }
            }
            FeatureMap { values: out }
        }
        AugConfig::Blur { kernel_sigma } => blur(fm, *kernel_sigma),
    }
}

/// Separable Gaussian blur with reflective boundary handling.
fn blur<S: Scalar>(fm: &FeatureMap<S>, sigma: f64) -> FeatureMap<S> {
    if sigma <= 0.0 {
        return fm.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut total = 0.0;
    for i in -radius..=radius {
        let w = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        total += w;
    }
    let kernel: Vec<S> = kernel.into_iter().map(|w| S::lit(w / total)).collect();

    // Reflect an out-of-range index back into [0, n) ("reflect" as in
    // mirroring about the boundary cell).
    let reflect = |idx: isize, n: isize| -> usize {
        let mut i = idx;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i - 1;
            }
            if i >= n {
                i = 2 * n - 1 - i;
            }
        }
        i as usize
    };

    let (h, w, c) = fm.values.dim();
    let mut pass_x: Array3<S> = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = S::zero();
                for (t, wt) in kernel.iter().enumerate() {
                    let jj = reflect(j as isize + t as isize - radius, w as isize);
                    acc += *wt * fm.values[(i, jj, ch)];
                }
                pass_x[(i, j, ch)] = acc;
            }
        }
    }
    let mut out: Array3<S> = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = S::zero();
                for (t, wt) in kernel.iter().enumerate() {
                    let ii = reflect(i as isize + t as isize - radius, h as isize);
                    acc += *wt * pass_x[(ii, j, ch)];
                }
                out[(i, j, ch)] = acc;
            }
        }
    }
    FeatureMap { values: out }
}

// ---------------------------------------------------------------------------
// Tensor file format
// ---------------------------------------------------------------------------

const FMAP_MAGIC: &[u8; 4] = b"FMAP";

/// Writes a feature map: magic `FMAP`, then `grid_h`, `grid_w`, `C` as
/// little-endian u32, then row-major (channels innermost) little-endian f32
/// values.
pub fn write_feature_map<S: Scalar>(path: &Path, fm: &FeatureMap<S>) -> Result<(), SceneError> {
    let io_err = |source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    };
    let (h, w, c) = fm.values.dim();
    let mut buf = Vec::with_capacity(16 + h * w * c * 4);
    buf.extend_from_slice(FMAP_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    for v in fm.values.iter() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)
}

/// Reads a feature map written by [`write_feature_map`].
pub fn read_feature_map<S: Scalar>(path: &Path) -> Result<FeatureMap<S>, SceneError> {
    let io_err = |source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    };
    let fmt_err = |message: &str| SceneError::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    if bytes.len() < 16 || &bytes[0..4] != FMAP_MAGIC {
        return Err(fmt_err(
            "not a feature-map file (bad magic or truncated header)",
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (h, w, c) = (word(4) as usize, word(8) as usize, word(12) as usize);
    let expected = 16 + h * w * c * 4;
    if bytes.len() != expected {
        return Err(fmt_err(&format!(
            "payload size {} does not match header ({h}x{w}x{c})",
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(h * w * c);
    for chunk in bytes[16..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        values.push(S::lit(f64::from(v)));
    }
    let values = Array3::from_shape_vec((h, w, c), values).expect("length checked");
    Ok(FeatureMap { values })
}
