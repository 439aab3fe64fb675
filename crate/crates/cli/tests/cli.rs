//! End-to-end tests of the `comining` binary: the five-stage pipeline, the
//! exit-code policy, byte-level reproducibility of reruns, and agreement
//! between a CLI training run and the same run driven through the library.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use comining::dataset::load_dataset;
use comining::train::{train, LoadedDataset, Mode, TrainConfig, TrainStatus};
use comining::Real;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_comining"));
    // The binary reads these as flag fallbacks; an inherited value would
    // change what the tests exercise.
    cmd.env_remove("COMINING_CONFIG");
    cmd.env_remove("COMINING_SEED");
    cmd.env_remove("COMINING_OUT");
    cmd
}

fn run(cmd: &mut Command) -> (Option<i32>, String, String) {
    let Output {
        status,
        stdout,
        stderr,
    } = cmd.output().expect("failed to spawn the binary");
    (
        status.code(),
        String::from_utf8_lossy(&stdout).into_owned(),
        String::from_utf8_lossy(&stderr).into_owned(),
    )
}

fn run_ok(cmd: &mut Command) -> String {
    let (code, stdout, stderr) = run(cmd);
    assert_eq!(code, Some(0), "stdout:\n{stdout}\nstderr:\n{stderr}");
    stdout
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap())
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn line_count(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

fn assert_same_bytes(a: &Path, b: &Path) {
    let fa = std::fs::read(a).unwrap();
    let fb = std::fs::read(b).unwrap();
    assert!(!fa.is_empty(), "{} is empty", a.display());
    assert_eq!(fa, fb, "{} and {} differ", a.display(), b.display());
}

const SYNTH_TOML: &str = "\
n_images = 24
grid_h = 8
grid_w = 8
channels = 4
num_classes = 3
objects_per_image = [1, 3]
object_size = [1, 1]
noise_sigma = 0.3
signature_seed = 5
";

/// Generates the standard small test dataset into `<root>/<name>` and
/// returns its path.
fn synth(root: &Path, name: &str, seed: u64) -> PathBuf {
    let config = root.join(format!("{name}_synth.toml"));
    write(&config, SYNTH_TOML);
    let out = root.join(name);
    run_ok(
        bin()
            .args(["synth", "--config"])
            .arg(&config)
            .arg("--seed")
            .arg(seed.to_string())
            .arg("--out")
            .arg(&out),
    );
    out
}

#[test]
fn pipeline_produces_complete_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    // synth
    let data = synth(root, "data", 1);
    assert!(data.join("annotations.json").exists());
    assert!(data.join("annotations.erased.json").exists());
    assert!(data.join("manifest.json").exists());
    let tensors = std::fs::read_dir(data.join("tensors")).unwrap().count();
    assert_eq!(tensors, 24);

    // sparsify
    let sparse = root.join("sparse");
    let stdout = run_ok(
        bin()
            .args(["sparsify", "--data"])
            .arg(&data)
            .args(["--protocol", "hard", "--seed", "11", "--out"])
            .arg(&sparse),
    );
    assert!(stdout.contains("hard"), "stdout: {stdout}");
    let manifest = read_json(&sparse.join("manifest.json"));
    assert_eq!(manifest["context"]["protocol"], "hard");
    assert_eq!(
        std::fs::read_dir(sparse.join("tensors")).unwrap().count(),
        24,
        "tensors must be copied alongside the sparsified annotations"
    );

    // train
    let train_toml = root.join("train.toml");
    write(
        &train_toml,
        &format!(
            "data = {:?}\n\n[train]\nmode = \"original\"\nseed = 7\n\n[train.schedule]\nn_max = 50\n",
            sparse.display().to_string()
        ),
    );
    let run_dir = root.join("run");
    let stdout = run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&train_toml)
            .arg("--out")
            .arg(&run_dir),
    );
    assert!(
        stdout.contains("completed 50 iterations"),
        "stdout: {stdout}"
    );
    assert_eq!(
        line_count(&run_dir.join("train_log.csv")),
        51,
        "header plus one row per iteration"
    );
    let summary = read_json(&run_dir.join("summary.json"));
    assert_eq!(summary["status"], "completed");
    assert_eq!(summary["mode"], "original");
    assert_eq!(summary["iterations"], 50);
    assert!(run_dir.join("checkpoint.bin").exists());
    assert!(
        !run_dir.join("pseudo_trace.csv").exists(),
        "single-view training must not emit a pseudo-label trace"
    );
    // The run's manifest carries the protocol of the dataset it trained on,
    // which the annotations alone cannot reveal.
    let manifest = read_json(&run_dir.join("manifest.json"));
    assert_eq!(manifest["context"]["protocol"], "hard");
    assert_eq!(manifest["context"]["mode"], "original");

    // eval (against the full annotations, from the stored tensors)
    let eval_dir = run_dir.join("eval");
    let stdout = run_ok(
        bin()
            .args(["eval", "--checkpoint"])
            .arg(run_dir.join("checkpoint.bin"))
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&eval_dir),
    );
    assert!(stdout.contains("ap="), "stdout: {stdout}");
    let metrics = read_json(&eval_dir.join("metrics.json"));
    assert!(metrics.get("ap").is_some());
    assert_eq!(
        line_count(&eval_dir.join("per_category.csv")),
        4,
        "header plus one row per category"
    );

    // report
    let report_dir = root.join("report");
    let stdout = run_ok(
        bin()
            .arg("report")
            .arg(&run_dir)
            .arg("--out")
            .arg(&report_dir),
    );
    let md = std::fs::read_to_string(report_dir.join("report.md")).unwrap();
    assert!(
        md.contains("| protocol | original | augmented | joint | comining |"),
        "report.md:\n{md}"
    );
    let row = md
        .lines()
        .find(|l| l.starts_with("| hard |"))
        .unwrap_or_else(|| panic!("no hard row in report.md:\n{md}"));
    let cells: Vec<&str> = row.split('|').map(str::trim).collect();
    assert!(
        cells[2].parse::<f64>().is_ok(),
        "the original column must hold this run's AP, got {row:?}"
    );
    assert!(stdout.contains("| hard |"), "the table is echoed to stdout");
    let csv = std::fs::read_to_string(report_dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("protocol,original,augmented,joint,comining\n"));
    assert_eq!(
        line_count(&report_dir.join("series").join("run.csv")),
        51,
        "the per-run series mirrors the training log"
    );
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = synth(root, "data", 2);

    // Unknown field inside the train section: named in the message.
    let bad_train = root.join("bad_train.toml");
    write(
        &bad_train,
        &format!(
            "data = {:?}\n\n[train]\nbogus = 1\n",
            data.display().to_string()
        ),
    );
    let (code, _, stderr) = run(bin()
        .args(["train", "--config"])
        .arg(&bad_train)
        .arg("--out")
        .arg(root.join("r")));
    assert_eq!(code, Some(2), "stderr: {stderr}");
    assert!(
        stderr.contains("bogus"),
        "the offending field must be named: {stderr}"
    );

    // Missing required synth field: also named.
    let bad_synth = root.join("bad_synth.toml");
    write(&bad_synth, "grid_h = 8\ngrid_w = 8\nnum_classes = 3\n");
    let (code, _, stderr) = run(bin()
        .args(["synth", "--config"])
        .arg(&bad_synth)
        .arg("--out")
        .arg(root.join("d")));
    assert_eq!(code, Some(2), "stderr: {stderr}");
    assert!(stderr.contains("n_images"), "stderr: {stderr}");

    // Unrecognized sparsification protocol.
    let (code, _, stderr) = run(bin()
        .args(["sparsify", "--data"])
        .arg(&data)
        .args(["--protocol", "quantum", "--out"])
        .arg(root.join("s")));
    assert_eq!(code, Some(2), "stderr: {stderr}");
    assert!(stderr.contains("quantum"), "stderr: {stderr}");

    // Eval needs exactly one source.
    let (code, _, stderr) = run(bin()
        .args(["eval", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(root.join("e")));
    assert_eq!(code, Some(2), "stderr: {stderr}");
    assert!(stderr.contains("exactly one"), "stderr: {stderr}");
    let (code, _, _) = run(bin()
        .args([
            "eval",
            "--checkpoint",
            "a.bin",
            "--detections",
            "b.json",
            "--data",
        ])
        .arg(&data)
        .arg("--out")
        .arg(root.join("e")));
    assert_eq!(code, Some(2));

    // Flag errors are reported by the parser with the same code.
    let (code, _, _) = run(bin().args(["train", "--frobnicate"]));
    assert_eq!(code, Some(2));
}

#[test]
fn os_failures_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    // Unreadable config file.
    let (code, _, stderr) = run(bin()
        .args(["synth", "--config"])
        .arg(root.join("nope.toml"))
        .arg("--out")
        .arg(root.join("d")));
    assert_eq!(code, Some(4), "stderr: {stderr}");
    assert!(stderr.contains("nope.toml"), "stderr: {stderr}");

    // Missing checkpoint file.
    let data = synth(root, "data", 3);
    let (code, _, stderr) = run(bin()
        .args(["eval", "--checkpoint"])
        .arg(root.join("missing.bin"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(root.join("e")));
    assert_eq!(code, Some(4), "stderr: {stderr}");
}

#[test]
fn diverged_training_exits_3_with_partial_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    // An overlap regression loss under a 200x learning rate reliably blows
    // up within a few dozen iterations on a wide grid with several objects
    // per image; the tiny smoke-test scenes are too tame to tip over.
    let synth_config = root.join("wide_synth.toml");
    write(
        &synth_config,
        "n_images = 24\ngrid_h = 16\ngrid_w = 16\nchannels = 8\nnum_classes = 4\n\
         objects_per_image = [3, 6]\nobject_size = [1, 1]\n",
    );
    let data = root.join("data");
    run_ok(
        bin()
            .args(["synth", "--config"])
            .arg(&synth_config)
            .args(["--seed", "1", "--out"])
            .arg(&data),
    );
    let sparse = root.join("sparse");
    run_ok(
        bin()
            .args(["sparsify", "--data"])
            .arg(&data)
            .args(["--protocol", "hard", "--seed", "2", "--out"])
            .arg(&sparse),
    );

    let config = root.join("diverge.toml");
    write(
        &config,
        &format!(
            "data = {:?}\n\n[train]\nmode = \"original\"\n\n[train.schedule]\nn_max = 2000\neta0 = 10.0\n\n\
             [train.model]\nreg_loss = \"iou\"\n",
            sparse.display().to_string()
        ),
    );
    let run_dir = root.join("run");
    let (code, _, stderr) = run(bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&run_dir));
    assert_eq!(code, Some(3), "stderr: {stderr}");
    assert!(stderr.contains("diverged at iteration"), "stderr: {stderr}");

    let summary = read_json(&run_dir.join("summary.json"));
    assert_eq!(summary["status"], "diverged");
    let at = summary["diverged_at"]
        .as_u64()
        .expect("diverged_at must be set") as usize;
    assert_eq!(
        line_count(&run_dir.join("train_log.csv")),
        at + 2,
        "partial log must be kept"
    );
    assert!(
        !run_dir.join("checkpoint.bin").exists(),
        "no final checkpoint for an aborted run"
    );
    let manifest = read_json(&run_dir.join("manifest.json"));
    assert_eq!(
        manifest["context"]["status"], "diverged",
        "the manifest still records the run"
    );
}

#[test]
fn reruns_are_byte_identical_and_match_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    // Same config and seed: identical datasets, whether the seed comes from
    // the flag or the environment fallback.
    let d1 = synth(root, "d1", 9);
    let d2 = synth(root, "d2", 9);
    for name in ["annotations.json", "annotations.erased.json"] {
        assert_same_bytes(&d1.join(name), &d2.join(name));
    }
    for entry in std::fs::read_dir(d1.join("tensors")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_same_bytes(
            &d1.join("tensors").join(&name),
            &d2.join("tensors").join(&name),
        );
    }
    let config = root.join("env_synth.toml");
    write(&config, SYNTH_TOML);
    let d3 = root.join("d3");
    run_ok(
        bin()
            .env("COMINING_SEED", "9")
            .args(["synth", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&d3),
    );
    assert_same_bytes(&d1.join("annotations.json"), &d3.join("annotations.json"));

    // Same training run twice: every artifact byte-identical. The mining
    // gate sits below the initial confidence so the pseudo-label path is on
    // from the first iteration.
    let sparse = root.join("sparse");
    run_ok(
        bin()
            .args(["sparsify", "--data"])
            .arg(&d1)
            .args(["--protocol", "hard", "--seed", "11", "--out"])
            .arg(&sparse),
    );
    let train_toml = root.join("train.toml");
    write(
        &train_toml,
        &format!(
            "data = {:?}\n\n[train]\nmode = \"comining\"\nseed = 42\n\n[train.schedule]\nn_max = 40\n\n\
             [train.cogen]\ntau = 0.01\ntheta1 = 0.5\ntheta2 = 0.5\n",
            sparse.display().to_string()
        ),
    );
    let r1 = root.join("r1");
    let r2 = root.join("r2");
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&train_toml)
            .arg("--out")
            .arg(&r1),
    );
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&train_toml)
            .arg("--out")
            .arg(&r2),
    );
    for name in [
        "train_log.csv",
        "pseudo_trace.csv",
        "summary.json",
        "checkpoint.bin",
    ] {
        assert_same_bytes(&r1.join(name), &r2.join(name));
    }
    let e1 = root.join("e1");
    let e2 = root.join("e2");
    for (run_dir, eval_dir) in [(&r1, &e1), (&r2, &e2)] {
        run_ok(
            bin()
                .args(["eval", "--checkpoint"])
                .arg(run_dir.join("checkpoint.bin"))
                .arg("--data")
                .arg(&d1)
                .arg("--out")
                .arg(eval_dir),
        );
    }
    assert_same_bytes(&e1.join("metrics.json"), &e2.join("metrics.json"));

    // The CLI run is the same computation the library exposes: driving the
    // identical configuration through `train` writes byte-identical
    // artifacts, checkpoint included.
    let mut cfg = TrainConfig {
        mode: Mode::CoMining,
        seed: 42,
        ..TrainConfig::default()
    };
    cfg.schedule.n_max = 40;
    cfg.cogen.tau = 0.01;
    let loaded = LoadedDataset::<Real>::from_dir(&sparse).unwrap();
    let lib_dir = root.join("lib_run");
    std::fs::create_dir_all(&lib_dir).unwrap();
    let outcome = train(&cfg, &loaded, Some(&lib_dir)).unwrap();
    assert_eq!(outcome.status, TrainStatus::Completed);
    for name in [
        "train_log.csv",
        "pseudo_trace.csv",
        "summary.json",
        "checkpoint.bin",
    ] {
        assert_same_bytes(&r1.join(name), &lib_dir.join(name));
    }
}

#[test]
fn prohibitive_gate_matches_joint_training_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = synth(root, "data", 6);

    let mut dirs = Vec::new();
    for mode in ["comining", "joint"] {
        let config = root.join(format!("{mode}.toml"));
        write(
            &config,
            &format!(
                "data = {:?}\n\n[train]\nmode = \"{mode}\"\nseed = 3\n\n[train.schedule]\nn_max = 30\n\n\
                 [train.cogen]\ntau = 1.1\ntheta1 = 0.5\ntheta2 = 0.5\n",
                data.display().to_string()
            ),
        );
        let run_dir = root.join(format!("run_{mode}"));
        run_ok(
            bin()
                .args(["train", "--config"])
                .arg(&config)
                .arg("--out")
                .arg(&run_dir),
        );
        dirs.push(run_dir);
    }

    // With the gate above any reachable confidence, co-mining degenerates to
    // plain two-view training: identical losses and identical parameters.
    assert_same_bytes(
        &dirs[0].join("train_log.csv"),
        &dirs[1].join("train_log.csv"),
    );
    assert_same_bytes(
        &dirs[0].join("checkpoint.bin"),
        &dirs[1].join("checkpoint.bin"),
    );
    let a = read_json(&dirs[0].join("summary.json"));
    let b = read_json(&dirs[1].join("summary.json"));
    assert_eq!(a["mode"], "comining");
    assert_eq!(b["mode"], "joint");
    for field in [
        "status",
        "iterations",
        "final_loss",
        "pseudo_original",
        "pseudo_augmented",
    ] {
        assert_eq!(a[field], b[field], "summary field {field}");
    }
    assert_eq!(a["pseudo_original"], 0);
    assert!(
        dirs[0].join("pseudo_trace.csv").exists(),
        "the co-mining run still emits its (empty) trace"
    );
}

#[test]
fn detections_eval_and_report_degradation() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = synth(root, "data", 8);

    // Feeding the ground truth back as detections scores perfectly.
    let ds = load_dataset::<Real>(&data.join("annotations.json")).unwrap();
    let mut records = Vec::new();
    for labels in ds.kept.values() {
        for inst in &labels.instances {
            records.push(serde_json::json!({
                "image_id": inst.image_id,
                "category_id": ds.categories[inst.class_id].id,
                "bbox": [inst.bbox.x_min, inst.bbox.y_min, inst.bbox.width(), inst.bbox.height()],
                "score": 0.9,
            }));
        }
    }
    let perfect = root.join("perfect.json");
    write(&perfect, &serde_json::to_string(&records).unwrap());
    let e_perfect = root.join("e_perfect");
    run_ok(
        bin()
            .args(["eval", "--detections"])
            .arg(&perfect)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&e_perfect),
    );
    let metrics = read_json(&e_perfect.join("metrics.json"));
    assert_eq!(metrics["ap"], 1.0);
    assert_eq!(metrics["ap50"], 1.0);
    assert_eq!(metrics["ap75"], 1.0);

    // No detections at all still evaluates, to zero.
    let empty = root.join("empty.json");
    write(&empty, "[]");
    let e_empty = root.join("e_empty");
    run_ok(
        bin()
            .args(["eval", "--detections"])
            .arg(&empty)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&e_empty),
    );
    let metrics = read_json(&e_empty.join("metrics.json"));
    assert_eq!(metrics["ap"], 0.0);

    // A run directory with only a summary still lands in the report: the
    // missing pieces degrade to warnings and an absent cell, not a failure.
    let bare = root.join("bare_run");
    std::fs::create_dir_all(&bare).unwrap();
    write(&bare.join("summary.json"), "{\"mode\": \"joint\"}\n");
    let report_dir = root.join("report");
    let (code, stdout, stderr) = run(bin().arg("report").arg(&bare).arg("--out").arg(&report_dir));
    assert_eq!(code, Some(0), "stderr: {stderr}");
    assert!(stderr.contains("no metrics.json"), "stderr: {stderr}");
    assert!(stderr.contains("no protocol recorded"), "stderr: {stderr}");
    let md = std::fs::read_to_string(report_dir.join("report.md")).unwrap();
    let row = md
        .lines()
        .find(|l| l.starts_with("| unknown |"))
        .unwrap_or_else(|| panic!("no unknown row in report.md:\n{md}"));
    let cells: Vec<&str> = row.split('|').map(str::trim).collect();
    assert_eq!(
        cells[4], "-",
        "the joint cell must be rendered absent, got {row:?}"
    );
    assert!(stdout.contains("1 run(s)"), "stdout: {stdout}");
}
