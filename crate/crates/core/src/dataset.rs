//! Annotation ingest, persistence, and sparsification.
//!
//! Datasets are read and written in a small COCO-schema JSON subset:
//! top-level `images` (id, width, height, file_name), `annotations`
//! (id, image_id, category_id, bbox as `[x, y, w, h]`), and `categories`
//! (id, name). Unknown fields are ignored on read and not emitted on write.
//! Internally boxes live in corner form and categories are addressed by
//! their index in the id-sorted category list.
//!
//! Sparsification splits each image's annotations into a kept set `Y` (the
//! only labels training may see) and an erased set `U` (diagnostics only,
//! persisted to a `.erased.json` sidecar).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::scalar::Scalar;

/// One image record: identity plus bounds in scene units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

/// One category record, keyed by its external id. The internal class index
/// of a category is its position in the id-sorted category list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

/// One annotated instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtInstance<S> {
    /// Unique within a dataset.
    pub instance_id: u64,
    pub image_id: u64,
    /// Class index in `[0, K)` (position in the id-sorted category list).
    pub class_id: usize,
    pub bbox: BBox<S>,
}

/// The annotations of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet<S> {
    pub image_id: u64,
    pub instances: Vec<GtInstance<S>>,
}

impl<S> LabelSet<S> {
    pub fn empty(image_id: u64) -> Self {
        Self {
            image_id,
            instances: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Annotation-erasure protocol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// No erasure; the complete annotation set.
    Full,
    /// Each image with at least two annotations loses exactly one.
    Easy,
    /// Each image loses `floor(n / 2)` annotations.
    Hard,
    /// Each annotated image keeps exactly one annotation.
    Extreme,
    /// Per category, a fraction of all instances dataset-wide is erased.
    Miss(f64),
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Full => write!(f, "full"),
            Protocol::Easy => write!(f, "easy"),
            Protocol::Hard => write!(f, "hard"),
            Protocol::Extreme => write!(f, "extreme"),
            Protocol::Miss(r) => write!(f, "miss:{r}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Protocol::Full),
            "easy" => Ok(Protocol::Easy),
            "hard" => Ok(Protocol::Hard),
            "extreme" => Ok(Protocol::Extreme),
            _ => {
                if let Some(rate) = s.strip_prefix("miss:") {
                    let rate: f64 = rate.parse().map_err(|_| DatasetError::BadProtocol {
                        text: s.to_string(),
                    })?;
                    Protocol::validated_miss(rate)
                } else {
                    Err(DatasetError::BadProtocol {
                        text: s.to_string(),
                    })
                }
            }
        }
    }
}

impl Protocol {
    pub fn validated_miss(rate: f64) -> Result<Self, DatasetError> {
        if rate.is_finite() && rate > 0.0 && rate < 1.0 {
            Ok(Protocol::Miss(rate))
        } else {
            Err(DatasetError::BadMissRate { rate })
        }
    }
}

/// A dataset with a kept/erased annotation partition.
///
/// `kept` holds the per-image label sets `Y` visible to training; `erased`
/// holds the held-out set `U`, which no training-facing accessor returns.
/// Both maps contain an entry for every image (possibly empty), and iterate
/// in ascending image id for determinism.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDataset<S> {
    pub images: Vec<ImageRecord>,
    pub categories: Vec<Category>,
    pub kept: BTreeMap<u64, LabelSet<S>>,
    pub erased: BTreeMap<u64, LabelSet<S>>,
    pub protocol: Protocol,
    /// Seed used for sparsification; `None` until sparsified.
    pub seed: Option<u64>,
}

impl<S: Scalar> SparseDataset<S> {
    /// Builds a full (un-sparsified) dataset from parts, creating empty label
    /// sets for unannotated images.
    pub fn full(
        images: Vec<ImageRecord>,
        categories: Vec<Category>,
        instances: Vec<GtInstance<S>>,
    ) -> Result<Self, DatasetError> {
        let mut kept: BTreeMap<u64, LabelSet<S>> = images
            .iter()
            .map(|im| (im.id, LabelSet::empty(im.id)))
            .collect();
        let erased: BTreeMap<u64, LabelSet<S>> = images
            .iter()
            .map(|im| (im.id, LabelSet::empty(im.id)))
            .collect();
        let mut seen_ids = BTreeSet::new();
        for inst in instances {
            if !seen_ids.insert(inst.instance_id) {
                return Err(DatasetError::InvalidAnnotation {
                    annotation_id: inst.instance_id,
                    message: "duplicate annotation id".into(),
                });
            }
            let set = kept
                .get_mut(&inst.image_id)
                .ok_or(DatasetError::InvalidAnnotation {
                    annotation_id: inst.instance_id,
                    message: format!("references unknown image {}", inst.image_id),
                })?;
            set.instances.push(inst);
        }
        Ok(Self {
            images,
            categories,
            kept,
            erased,
            protocol: Protocol::Full,
            seed: None,
        })
    }

    /// The number of classes (categories).
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    /// The only training-facing label accessor: kept annotations of one
    /// image. Erased instances are never returned here.
    pub fn training_labels(&self, image_id: u64) -> Option<&LabelSet<S>> {
        self.kept.get(&image_id)
    }

    pub fn kept_count(&self) -> usize {
        self.kept.values().map(|l| l.len()).sum()
    }

    pub fn erased_count(&self) -> usize {
        self.erased.values().map(|l| l.len()).sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("image {image_id}: {message}")]
    InvalidImage { image_id: u64, message: String },
    #[error("category {category_id}: {message}")]
    InvalidCategory { category_id: u32, message: String },
    #[error("annotation {annotation_id}: {message}")]
    InvalidAnnotation { annotation_id: u64, message: String },
    #[error(
        "dataset is already sparsified (protocol {protocol}); sparsify expects a full dataset"
    )]
    AlreadySparsified { protocol: Protocol },
    #[error("unknown protocol {text:?}; expected full|easy|hard|extreme|miss:<rate>")]
    BadProtocol { text: String },
    #[error("miss rate {rate} is outside (0, 1)")]
    BadMissRate { rate: f64 },
}

// ---------------------------------------------------------------------------
// COCO-schema subset (serde view)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    file_name: String,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
}

/// Derives the erased-set sidecar path: `x.json` maps to `x.erased.json`,
/// anything else gets `.erased.json` appended.
pub fn erased_sidecar_path(path: &Path) -> PathBuf {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let sidecar = match name.strip_suffix(".json") {
        Some(stem) => format!("{stem}.erased.json"),
        None => format!("{name}.erased.json"),
    };
    path.with_file_name(sidecar)
}

/// Loads a dataset from a COCO-schema subset file as a full dataset
/// (protocol `Full`, empty erased sets).
///
/// Every record is validated: ids must be unique, annotations must reference
/// known images and categories, and each box must have positive extent and
/// lie inside its image's bounds.
pub fn load_dataset<S: Scalar>(path: &Path) -> Result<SparseDataset<S>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: CocoFile = serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;

    let mut categories: Vec<Category> = file
        .categories
        .into_iter()
        .map(|c| Category {
            id: c.id,
            name: c.name,
        })
        .collect();
    categories.sort_by_key(|c| c.id);
    for pair in categories.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(DatasetError::InvalidCategory {
                category_id: pair[0].id,
                message: "duplicate category id".into(),
            });
        }
    }
    let class_index: BTreeMap<u32, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id, i))
        .collect();

    let mut image_bounds: BTreeMap<u64, (u32, u32)> = BTreeMap::new();
    let images: Vec<ImageRecord> = file
        .images
        .into_iter()
        .map(|im| ImageRecord {
            id: im.id,
            width: im.width,
            height: im.height,
            file_name: im.file_name,
        })
        .collect();
    for im in &images {
        if image_bounds.insert(im.id, (im.width, im.height)).is_some() {
            return Err(DatasetError::InvalidImage {
                image_id: im.id,
                message: "duplicate image id".into(),
            });
        }
    }

    let mut instances = Vec::with_capacity(file.annotations.len());
    for ann in file.annotations {
        let [x, y, w, h] = ann.bbox;
        let (img_w, img_h) =
            *image_bounds
                .get(&ann.image_id)
                .ok_or(DatasetError::InvalidAnnotation {
                    annotation_id: ann.id,
                    message: format!("references unknown image {}", ann.image_id),
                })?;
        let class_id =
            *class_index
                .get(&ann.category_id)
                .ok_or(DatasetError::InvalidAnnotation {
                    annotation_id: ann.id,
                    message: format!("references unknown category {}", ann.category_id),
                })?;
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(DatasetError::InvalidAnnotation {
                annotation_id: ann.id,
                message: "non-finite bbox".into(),
            });
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(DatasetError::InvalidAnnotation {
                annotation_id: ann.id,
                message: format!("non-positive bbox extent [{x}, {y}, {w}, {h}]"),
            });
        }
        if x < 0.0 || y < 0.0 || x + w > f64::from(img_w) || y + h > f64::from(img_h) {
            return Err(DatasetError::InvalidAnnotation {
                annotation_id: ann.id,
                message: format!("bbox [{x}, {y}, {w}, {h}] outside image bounds {img_w}x{img_h}"),
            });
        }
        instances.push(GtInstance {
            instance_id: ann.id,
            image_id: ann.image_id,
            class_id,
            bbox: BBox::from_xywh(S::lit(x), S::lit(y), S::lit(w), S::lit(h)),
        });
    }

    SparseDataset::full(images, categories, instances)
}

fn labels_to_coco<S: Scalar>(
    ds: &SparseDataset<S>,
    labels: &BTreeMap<u64, LabelSet<S>>,
) -> CocoFile {
    let annotations = labels
        .values()
        .flat_map(|set| set.instances.iter())
        .map(|inst| {
            let [x, y, w, h] = inst.bbox.to_xywh();
            CocoAnnotation {
                id: inst.instance_id,
                image_id: inst.image_id,
                category_id: ds.categories[inst.class_id].id,
                bbox: [x.as_f64(), y.as_f64(), w.as_f64(), h.as_f64()],
            }
        })
        .collect();
    CocoFile {
        images: ds
            .images
            .iter()
            .map(|im| CocoImage {
                id: im.id,
                width: im.width,
                height: im.height,
                file_name: im.file_name.clone(),
            })
            .collect(),
        annotations,
        categories: ds
            .categories
            .iter()
            .map(|c| CocoCategory {
                id: c.id,
                name: c.name.clone(),
            })
            .collect(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(value).expect("schema types serialize");
    fs::write(path, text).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the kept annotations to `path` and the erased annotations to the
/// `.erased.json` sidecar next to it.
pub fn save_dataset<S: Scalar>(ds: &SparseDataset<S>, path: &Path) -> Result<(), DatasetError> {
    write_json(path, &labels_to_coco(ds, &ds.kept))?;
    write_json(&erased_sidecar_path(path), &labels_to_coco(ds, &ds.erased))
}

// ---------------------------------------------------------------------------
// Sparsification
// ---------------------------------------------------------------------------

/// Applies an erasure protocol to a full dataset, moving the selected
/// instances from `kept` to `erased`. Deterministic given `seed`.
///
/// Selection draws happen in ascending image-id order (ascending class index
/// for [`Protocol::Miss`]); images a protocol does not touch consume no
/// randomness. Erasure never mutates geometry or class ids, and both sides of
/// the partition preserve the original in-image instance order.
pub fn sparsify<S: Scalar>(
    ds: &SparseDataset<S>,
    protocol: Protocol,
    seed: u64,
) -> Result<SparseDataset<S>, DatasetError> {
    if ds.protocol != Protocol::Full || ds.erased_count() != 0 {
        return Err(DatasetError::AlreadySparsified {
            protocol: ds.protocol,
        });
    }
    if let Protocol::Miss(rate) = protocol {
        Protocol::validated_miss(rate)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Instance ids selected for erasure.
    let mut selected: BTreeSet<u64> = BTreeSet::new();

    match protocol {
        Protocol::Full => {}
        Protocol::Easy => {
            for set in ds.kept.values() {
                let n = set.len();
                if n >= 2 {
                    let idx = rng.random_range(0..n);
                    selected.insert(set.instances[idx].instance_id);
                }
            }
        }
        Protocol::Hard => {
            for set in ds.kept.values() {
                let n = set.len();
                let k = n / 2;
                if k > 0 {
                    for idx in sorted_sample(&mut rng, n, k) {
                        selected.insert(set.instances[idx].instance_id);
                    }
                }
            }
        }
        Protocol::Extreme => {
            for set in ds.kept.values() {
                let n = set.len();
                if n >= 2 {
                    let keep = rng.random_range(0..n);
                    for (idx, inst) in set.instances.iter().enumerate() {
                        if idx != keep {
                            selected.insert(inst.instance_id);
                        }
                    }
                }
            }
        }
        Protocol::Miss(rate) => {
            for class_id in 0..ds.categories.len() {
                let members: Vec<u64> = ds
                    .kept
                    .values()
                    .flat_map(|set| set.instances.iter())
                    .filter(|inst| inst.class_id == class_id)
                    .map(|inst| inst.instance_id)
                    .collect();
                let m_c = members.len();
                let k = (rate * m_c as f64).floor() as usize;
                if k > 0 {
                    for idx in sorted_sample(&mut rng, m_c, k) {
                        selected.insert(members[idx]);
                    }
                }
            }
        }
    }

    let mut out = ds.clone();
    out.protocol = protocol;
    out.seed = Some(seed);
    for (image_id, set) in &ds.kept {
        let (erased, kept): (Vec<_>, Vec<_>) = set
            .instances
            .iter()
            .copied()
            .partition(|inst| selected.contains(&inst.instance_id));
        out.kept.get_mut(image_id).expect("image present").instances = kept;
        out.erased
            .get_mut(image_id)
            .expect("image present")
            .instances = erased;
    }
    Ok(out)
}

/// `k` distinct indices drawn uniformly from `0..n`, in ascending order.
fn sorted_sample<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}
