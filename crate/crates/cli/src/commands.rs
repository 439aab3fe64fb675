//! Implementations of the five subcommands. Each one writes its artifacts
//! first and its manifest last, so the presence of `manifest.json` marks a
//! completed run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use comining::dataset::{
    erased_sidecar_path, load_dataset, save_dataset, sparsify, Category, ImageRecord, Protocol,
};
use comining::eval::{evaluate, Metrics};
use comining::geometry::{BBox, Detection};
use comining::model::{load_checkpoint, predict};
use comining::scene::{generate_scene, render, write_feature_map};
use comining::train::{train, LoadedDataset, TrainStatus};
use comining::{AnchorGrid, Real, SceneConfig};

use crate::configs::{read_toml, DetRecord, EvalFileConfig, SynthConfig, TrainFileConfig};
use crate::error::{self, CliError};
use crate::manifest::RunManifest;

fn to_json<T: serde::Serialize>(value: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(value).map_err(|e| CliError::Io(format!("failed to encode config: {e}")))
}

fn write_json_pretty<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("failed to encode {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Generates a dataset directory: `annotations.json` (plus the empty erased
/// sidecar), one tensor file per image under `tensors/`, and the manifest.
pub fn run_synth(config_path: &Path, seed: u64, out: &Path) -> Result<(), CliError> {
    let cfg: SynthConfig = read_toml(config_path)?;
    let scene_cfg: SceneConfig = SceneConfig::new(
        cfg.grid_h,
        cfg.grid_w,
        cfg.channels,
        cfg.num_classes,
        (cfg.objects_per_image[0], cfg.objects_per_image[1]),
        (cfg.object_size[0], cfg.object_size[1]),
        cfg.noise_sigma,
        cfg.signature_seed,
    )
    .map_err(error::from_scene)?;

    let tensors_dir = out.join("tensors");
    fs::create_dir_all(&tensors_dir).map_err(|e| CliError::io(&tensors_dir, e))?;

    // One generator drives both layout and rendering, so the whole dataset
    // is a pure function of (config, seed).
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(cfg.n_images);
    let mut instances = Vec::new();
    let mut next_instance_id = 1u64;
    for i in 0..cfg.n_images {
        let image_id = (i + 1) as u64;
        let scene = generate_scene(&scene_cfg, image_id, next_instance_id, &mut rng);
        next_instance_id += scene.instances.len() as u64;
        let fm = render(&scene, &scene_cfg, &mut rng);
        let file_name = format!("img_{image_id:06}.fmap");
        write_feature_map(&tensors_dir.join(&file_name), &fm).map_err(error::from_scene)?;
        images.push(ImageRecord {
            id: image_id,
            width: cfg.grid_w as u32,
            height: cfg.grid_h as u32,
            file_name,
        });
        instances.extend(scene.instances);
    }
    let categories = (0..cfg.num_classes)
        .map(|k| Category {
            id: (k + 1) as u32,
            name: format!("class_{}", k + 1),
        })
        .collect();
    let ds = comining::SparseDataset::full(images, categories, instances)
        .map_err(error::from_dataset)?;
    save_dataset(&ds, &out.join("annotations.json")).map_err(error::from_dataset)?;

    let mut manifest = RunManifest::new("synth", Some(seed), to_json(&cfg)?);
    manifest.insert_context("protocol", Protocol::Full);
    manifest.insert_context("n_images", ds.images.len());
    manifest.insert_context("n_instances", ds.kept_count());
    manifest.push_output(out, "annotations.json")?;
    manifest.push_output(out, "annotations.erased.json")?;
    for im in &ds.images {
        manifest.push_output(out, &format!("tensors/{}", im.file_name))?;
    }
    manifest.write(out)?;

    println!(
        "synth: wrote {} images / {} instances to {}",
        ds.images.len(),
        ds.kept_count(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sparsify
// ---------------------------------------------------------------------------

/// Applies an erasure protocol to a dataset directory, producing a new
/// directory with the kept annotations, the erased sidecar, and copies of
/// the tensors.
pub fn run_sparsify(data: &Path, protocol: &str, seed: u64, out: &Path) -> Result<(), CliError> {
    let protocol: Protocol = protocol.parse().map_err(error::from_dataset)?;
    let ann_in = data.join("annotations.json");
    let ds = load_dataset::<Real>(&ann_in).map_err(error::from_dataset)?;
    let sparse = sparsify(&ds, protocol, seed).map_err(error::from_dataset)?;

    let tensors_dir = out.join("tensors");
    fs::create_dir_all(&tensors_dir).map_err(|e| CliError::io(&tensors_dir, e))?;
    for im in &sparse.images {
        let src = data.join("tensors").join(&im.file_name);
        fs::copy(&src, tensors_dir.join(&im.file_name)).map_err(|e| CliError::io(&src, e))?;
    }
    save_dataset(&sparse, &out.join("annotations.json")).map_err(error::from_dataset)?;

    let config = serde_json::json!({
        "data": data.display().to_string(),
        "protocol": protocol.to_string(),
    });
    let mut manifest = RunManifest::new("sparsify", Some(seed), config);
    manifest.insert_context("protocol", protocol);
    manifest.insert_context("kept", sparse.kept_count());
    manifest.insert_context("erased", sparse.erased_count());
    manifest.push_input(&ann_in)?;
    manifest.push_output(out, "annotations.json")?;
    manifest.push_output(out, "annotations.erased.json")?;
    for im in &sparse.images {
        manifest.push_output(out, &format!("tensors/{}", im.file_name))?;
    }
    manifest.write(out)?;

    println!(
        "sparsify: {} kept {} / erased {} instances; dataset written to {}",
        protocol,
        sparse.kept_count(),
        sparse.erased_count(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Trains per the config file, writing `train_log.csv`, `summary.json`,
/// checkpoints, and (for co-mining) `pseudo_trace.csv` into the run
/// directory. A diverged run keeps its partial artifacts and exits with
/// code 3.
pub fn run_train(config_path: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut cfg: TrainFileConfig = read_toml(config_path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.validate().map_err(error::from_train)?;

    let data = LoadedDataset::<Real>::from_dir(&cfg.data).map_err(error::from_train)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let outcome = train(&cfg.train, &data, Some(out)).map_err(error::from_train)?;

    let mut manifest = RunManifest::new("train", Some(cfg.train.seed), to_json(&cfg)?);
    manifest.insert_context("mode", cfg.train.mode);
    manifest.insert_context("protocol", dataset_protocol(&cfg.data));
    manifest.insert_context("status", &outcome.summary.status);
    let ann_in = cfg.data.join("annotations.json");
    manifest.push_input(&ann_in)?;
    let sidecar = erased_sidecar_path(&ann_in);
    if sidecar.exists() {
        manifest.push_input(&sidecar)?;
    }
    for im in &data.dataset.images {
        manifest.push_input(&cfg.data.join("tensors").join(&im.file_name))?;
    }
    for name in run_dir_artifacts(out)? {
        manifest.push_output(out, &name)?;
    }
    manifest.write(out)?;

    match outcome.status {
        TrainStatus::Completed => {
            println!(
                "train: {} completed {} iterations (final loss {:.6}); run dir {}",
                cfg.train.mode,
                outcome.summary.iterations,
                outcome.summary.final_loss.unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        TrainStatus::Diverged { at_iter } => Err(CliError::Diverged { at_iter }),
    }
}

/// The sparsification protocol a dataset directory was produced under, read
/// from its manifest. The annotations file alone cannot tell: a sparsified
/// dataset's kept annotations reload as a self-consistent full dataset.
fn dataset_protocol(data: &Path) -> String {
    read_json_value(&data.join("manifest.json"))
        .ok()
        .and_then(|v| {
            v.get("context")
                .and_then(|c| c.get("protocol"))
                .and_then(|p| p.as_str())
                .map(str::to_string)
        })
        .unwrap_or_else(|| "unknown".to_string())
}

/// The training artifacts present in a run directory, in a fixed order:
/// the log, the summary, the pseudo-label trace if any, then checkpoints in
/// name order.
fn run_dir_artifacts(out: &Path) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    for fixed in ["train_log.csv", "summary.json", "pseudo_trace.csv"] {
        if out.join(fixed).exists() {
            names.push(fixed.to_string());
        }
    }
    let mut checkpoints = Vec::new();
    let entries = fs::read_dir(out).map_err(|e| CliError::io(out, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(out, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("checkpoint") && name.ends_with(".bin") {
            checkpoints.push(name);
        }
    }
    checkpoints.sort();
    names.extend(checkpoints);
    Ok(names)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Scores a checkpoint (by running inference on the dataset's un-augmented
/// tensors) or a pre-computed detections file against a dataset's kept
/// annotations, writing `metrics.json` and `per_category.csv`.
pub fn run_eval(
    checkpoint: Option<&Path>,
    detections: Option<&Path>,
    data: &Path,
    config: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg: EvalFileConfig = match config {
        Some(path) => read_toml(path)?,
        None => EvalFileConfig::default(),
    };

    let source_json = |path: Option<&Path>| path.map(|p| p.display().to_string());
    let config_snapshot = serde_json::json!({
        "data": data.display().to_string(),
        "checkpoint": source_json(checkpoint),
        "detections": source_json(detections),
        "eval": to_json(&cfg)?,
    });
    let mut manifest = RunManifest::new("eval", None, config_snapshot);

    let (dataset, dets) = match (checkpoint, detections) {
        (Some(ckpt), None) => {
            // Inference path: every image's stored tensor, no augmentation.
            let loaded = LoadedDataset::<Real>::from_dir(data).map_err(error::from_train)?;
            let (params, _velocity, shapes) =
                load_checkpoint::<Real>(ckpt).map_err(error::from_model)?;
            let (grid_h, grid_w) = loaded.grid();
            let anchors = AnchorGrid::build(grid_h, grid_w, &shapes);
            let mut dets: BTreeMap<u64, Vec<Detection<Real>>> = BTreeMap::new();
            for im in &loaded.dataset.images {
                let fm = &loaded.features[&im.id];
                let found = predict(&params, fm, &anchors, cfg.score_thr, cfg.nms_thr)
                    .map_err(error::from_model)?;
                dets.insert(im.id, found);
            }
            manifest.push_input(ckpt)?;
            manifest.push_input(&data.join("annotations.json"))?;
            for im in &loaded.dataset.images {
                manifest.push_input(&data.join("tensors").join(&im.file_name))?;
            }
            manifest.insert_context("source", "checkpoint");
            (loaded.dataset, dets)
        }
        (None, Some(file)) => {
            let dataset = load_dataset::<Real>(&data.join("annotations.json"))
                .map_err(error::from_dataset)?;
            let text = fs::read_to_string(file).map_err(|e| CliError::io(file, e))?;
            let records: Vec<DetRecord> = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", file.display())))?;
            let class_of: BTreeMap<u32, usize> = dataset
                .categories
                .iter()
                .enumerate()
                .map(|(k, c)| (c.id, k))
                .collect();
            let mut dets: BTreeMap<u64, Vec<Detection<Real>>> = BTreeMap::new();
            for r in &records {
                let class_id = *class_of.get(&r.category_id).ok_or_else(|| {
                    CliError::Config(format!(
                        "{}: unknown category_id {}",
                        file.display(),
                        r.category_id
                    ))
                })?;
                let [x, y, w, h] = r.bbox;
                dets.entry(r.image_id).or_default().push(Detection {
                    bbox: BBox::new(x, y, x + w, y + h),
                    class_id,
                    score: r.score,
                });
            }
            manifest.push_input(file)?;
            manifest.push_input(&data.join("annotations.json"))?;
            manifest.insert_context("source", "detections");
            (dataset, dets)
        }
        _ => {
            return Err(CliError::Config(
                "exactly one of --checkpoint and --detections is required".into(),
            ))
        }
    };

    let metrics = evaluate(&dets, &dataset, &cfg.metrics).map_err(error::from_eval)?;

    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_json_pretty(&out.join("metrics.json"), &metrics)?;
    write_per_category_csv(&out.join("per_category.csv"), &dataset.categories, &metrics)?;
    manifest.push_output(out, "metrics.json")?;
    manifest.push_output(out, "per_category.csv")?;
    manifest.write(out)?;

    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "eval: ap={} ap50={} ap75={} over {} images; metrics in {}",
        show(metrics.ap),
        show(metrics.ap50),
        show(metrics.ap75),
        dataset.images.len(),
        out.display()
    );
    Ok(())
}

fn write_per_category_csv(
    path: &Path,
    categories: &[Category],
    metrics: &Metrics,
) -> Result<(), CliError> {
    let mut text = String::from("category_id,name,ap\n");
    for cat in categories {
        let ap = metrics
            .per_category
            .get(&cat.id)
            .copied()
            .flatten()
            .map_or(String::new(), |v| format!("{v:.6}"));
        text.push_str(&format!("{},{},{}\n", cat.id, cat.name, ap));
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// One training run's contribution to the report table.
struct RunRow {
    protocol: String,
    mode: String,
    ap: Option<f64>,
}

/// Fixed column order of the report table.
const MODE_COLUMNS: [&str; 4] = ["original", "augmented", "joint", "comining"];

/// Aggregates run directories into a protocol x mode table of AP (x100),
/// plus per-run loss/pseudo-count series under `series/`. Runs with missing
/// pieces degrade to warnings, never failures.
pub fn run_report(runs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let series_dir = out.join("series");
    fs::create_dir_all(&series_dir).map_err(|e| CliError::io(&series_dir, e))?;

    let mut warnings: Vec<String> = Vec::new();
    let mut rows: Vec<RunRow> = Vec::new();
    let mut inputs: Vec<PathBuf> = Vec::new();
    let mut series_files: Vec<String> = Vec::new();
    let mut used_names: BTreeSet<String> = BTreeSet::new();

    for run in runs {
        // Mode from the run's summary; a run we cannot identify is skipped.
        let summary_path = run.join("summary.json");
        let mode = match read_json_value(&summary_path) {
            Ok(v) => match v.get("mode").and_then(|m| m.as_str()) {
                Some(m) => {
                    inputs.push(summary_path);
                    m.to_string()
                }
                None => {
                    warnings.push(format!("{}: summary.json has no mode", run.display()));
                    continue;
                }
            },
            Err(msg) => {
                warnings.push(format!("{msg}; run skipped"));
                continue;
            }
        };
        if !MODE_COLUMNS.contains(&mode.as_str()) {
            warnings.push(format!(
                "{}: unknown mode {mode:?}; run skipped",
                run.display()
            ));
            continue;
        }

        // Protocol from the manifest context (recorded at training time).
        let protocol = match read_json_value(&run.join("manifest.json")) {
            Ok(v) => v
                .get("context")
                .and_then(|c| c.get("protocol"))
                .and_then(|p| p.as_str())
                .map(str::to_string),
            Err(_) => None,
        };
        let protocol = protocol.unwrap_or_else(|| {
            warnings.push(format!(
                "{}: no protocol recorded in manifest.json; listed as unknown",
                run.display()
            ));
            "unknown".to_string()
        });

        // AP from metrics.json, either in the run dir or its eval/ subdir.
        let metrics_path = ["metrics.json", "eval/metrics.json"]
            .iter()
            .map(|rel| run.join(rel))
            .find(|p| p.exists());
        let ap = match metrics_path {
            Some(path) => match fs::read_to_string(&path) {
                Ok(text) => match serde_json::from_str::<Metrics>(&text) {
                    Ok(metrics) => {
                        inputs.push(path);
                        metrics.ap
                    }
                    Err(e) => {
                        warnings.push(format!("{}: {e}; cell left absent", path.display()));
                        None
                    }
                },
                Err(e) => {
                    warnings.push(format!("{}: {e}; cell left absent", path.display()));
                    None
                }
            },
            None => {
                warnings.push(format!(
                    "{}: no metrics.json found; cell left absent",
                    run.display()
                ));
                None
            }
        };

        if let Some(name) = write_series(run, &series_dir, &mut used_names, &mut warnings)? {
            inputs.push(run.join("train_log.csv"));
            series_files.push(name);
        }

        rows.push(RunRow { protocol, mode, ap });
    }

    // protocol -> mode -> all APs seen (multi-seed cells are averaged).
    let mut cells: BTreeMap<(u8, String), BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for row in &rows {
        let key = (protocol_rank(&row.protocol), row.protocol.clone());
        let by_mode = cells.entry(key).or_default();
        let cell = by_mode
            .entry(
                MODE_COLUMNS[MODE_COLUMNS
                    .iter()
                    .position(|m| *m == row.mode)
                    .expect("mode checked against columns above")],
            )
            .or_default();
        if let Some(ap) = row.ap {
            cell.push(ap);
        }
    }

    let csv_text = render_table(&cells, ",", "", false);
    let md_table = render_table(&cells, " | ", "-", true);
    fs::write(out.join("report.csv"), &csv_text)
        .map_err(|e| CliError::io(&out.join("report.csv"), e))?;
    let mut md = String::from(
        "# Detection AP by protocol and mode\n\nAP x100, averaged over runs in each cell.\n\n",
    );
    md.push_str(&md_table);
    if !warnings.is_empty() {
        md.push_str(&format!(
            "\n{} warning(s); see the command output.\n",
            warnings.len()
        ));
    }
    fs::write(out.join("report.md"), &md).map_err(|e| CliError::io(&out.join("report.md"), e))?;

    let config = serde_json::json!({
        "runs": runs.iter().map(|r| r.display().to_string()).collect::<Vec<_>>(),
    });
    let mut manifest = RunManifest::new("report", None, config);
    manifest.insert_context("runs", runs.len());
    manifest.insert_context("warnings", warnings.len());
    for input in &inputs {
        manifest.push_input(input)?;
    }
    manifest.push_output(out, "report.csv")?;
    manifest.push_output(out, "report.md")?;
    for name in &series_files {
        manifest.push_output(out, &format!("series/{name}"))?;
    }
    manifest.write(out)?;

    print!("{md_table}");
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "report: {} run(s), {} warning(s); written to {}",
        rows.len(),
        warnings.len(),
        out.display()
    );
    Ok(())
}

fn read_json_value(path: &Path) -> Result<serde_json::Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Canonical row order: full, easy, hard, extreme, miss (by rate), unknown.
fn protocol_rank(protocol: &str) -> u8 {
    match protocol {
        "full" => 0,
        "easy" => 1,
        "hard" => 2,
        "extreme" => 3,
        p if p.starts_with("miss") => 4,
        _ => 5,
    }
}

/// Renders the table in CSV or Markdown flavor. Cells show mean AP x100 to
/// two decimals; `absent` fills cells without any defined AP.
fn render_table(
    cells: &BTreeMap<(u8, String), BTreeMap<&str, Vec<f64>>>,
    sep: &str,
    absent: &str,
    markdown: bool,
) -> String {
    let mut text = String::new();
    let edge = if markdown { "| " } else { "" };
    let edge_end = if markdown { " |" } else { "" };
    text.push_str(&format!(
        "{edge}protocol{sep}{}{edge_end}\n",
        MODE_COLUMNS.join(sep)
    ));
    if markdown {
        let dashes = vec!["---"; 1 + MODE_COLUMNS.len()];
        text.push_str(&format!("{edge}{}{edge_end}\n", dashes.join(sep)));
    }
    for ((_, protocol), by_mode) in cells {
        let mut fields = vec![protocol.clone()];
        for mode in MODE_COLUMNS {
            let cell = by_mode.get(mode).filter(|v| !v.is_empty()).map(|v| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                format!("{:.2}", mean * 100.0)
            });
            fields.push(cell.unwrap_or_else(|| absent.to_string()));
        }
        text.push_str(&format!("{edge}{}{edge_end}\n", fields.join(sep)));
    }
    text
}

/// Copies one run's per-iteration loss and pseudo-label counts into
/// `series/<run-name>.csv` (columns `iter,loss,pseudo`). Returns the file
/// name, or None (with a warning) when the run has no readable log.
fn write_series(
    run: &Path,
    series_dir: &Path,
    used_names: &mut BTreeSet<String>,
    warnings: &mut Vec<String>,
) -> Result<Option<String>, CliError> {
    let log_path = run.join("train_log.csv");
    if !log_path.exists() {
        warnings.push(format!(
            "{}: no train_log.csv; series skipped",
            run.display()
        ));
        return Ok(None);
    }
    let mut reader = match csv::Reader::from_path(&log_path) {
        Ok(r) => r,
        Err(e) => {
            warnings.push(format!("{}: {e}; series skipped", log_path.display()));
            return Ok(None);
        }
    };
    let mut rows: Vec<comining::train::IterRecord> = Vec::new();
    for record in reader.deserialize() {
        match record {
            Ok(row) => rows.push(row),
            Err(e) => {
                warnings.push(format!("{}: {e}; series truncated", log_path.display()));
                break;
            }
        }
    }

    let base = run
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    let mut name = format!("{base}.csv");
    let mut suffix = 2;
    while !used_names.insert(name.clone()) {
        name = format!("{base}_{suffix}.csv");
        suffix += 1;
    }

    let mut text = String::from("iter,loss,pseudo\n");
    for row in &rows {
        text.push_str(&format!(
            "{},{},{}\n",
            row.iter,
            row.loss,
            row.pseudo_o + row.pseudo_a
        ));
    }
    let path = series_dir.join(&name);
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(Some(name))
}
