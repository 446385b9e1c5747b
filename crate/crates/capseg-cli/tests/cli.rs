//! End-to-end tests of the capseg binary: artifact layout, determinism,
//! exit codes, and agreement between `compare` and standalone `train` runs.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn capseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capseg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn capseg")
}

fn run_ok(args: &[&str], cwd: &Path) -> String {
    let out = capseg(args, cwd);
    assert!(
        out.status.success(),
        "capseg {args:?} failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// Relative path -> file bytes for every file under `root`.
fn dir_contents(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("read_dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).expect("read file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn synth(cwd: &Path, split: &str, count: &str, seed: &str) {
    run_ok(
        &[
            "synth", "--out", "data", "--split", split, "--count", count, "--size", "16",
            "--seed", seed,
        ],
        cwd,
    );
}

#[test]
fn synth_writes_requested_count_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cwd = tmp.path();
    let stdout = run_ok(
        &["synth", "--out", "a", "--count", "12", "--size", "16", "--seed", "3"],
        cwd,
    );
    assert!(stdout.contains("wrote 12 samples (3 cases)"), "stdout: {stdout}");

    for sub in ["images", "masks_expert", "masks_nonexpert"] {
        let n = std::fs::read_dir(cwd.join("a/train").join(sub)).unwrap().count();
        assert_eq!(n, 12, "{sub} file count");
    }

    run_ok(
        &["synth", "--out", "b", "--count", "12", "--size", "16", "--seed", "3"],
        cwd,
    );
    assert_eq!(dir_contents(&cwd.join("a")), dir_contents(&cwd.join("b")));
}

#[test]
fn synth_zero_perturb_makes_annotators_agree() {
    let tmp = TempDir::new().unwrap();
    let cwd = tmp.path();
    run_ok(
        &[
            "synth", "--out", "data", "--count", "4", "--size", "16", "--seed", "1",
            "--perturb", "0",
        ],
        cwd,
    );
    let contents = dir_contents(&cwd.join("data"));
    let experts: Vec<_> = contents.keys().filter(|k| k.contains("masks_expert")).collect();
    assert_eq!(experts.len(), 4);
    for key in experts {
        let twin = key.replace("masks_expert", "masks_nonexpert");
        assert_eq!(contents[key], contents[&twin], "{key} differs from {twin}");
    }
}

#[test]
fn train_defaults_match_documented_hyperparameters() {
    let tmp = TempDir::new().unwrap();
    let cwd = tmp.path();
    synth(cwd, "train", "12", "3");
    run_ok(&["train", "--data", "data", "--out", "run", "--input-size", "16"], cwd);

    let config = std::fs::read_to_string(cwd.join("run/config.txt")).unwrap();
    for line in [
        "lr=0.01",
        "momentum=0.9",
        "weight_decay=0.0001",
        "batch=8",
        "epochs=10",
        "loss=adaptive_focal",
        "optimizer=sgd_momentum",
        "ks=5",
        "beta=1",
        "gamma_f=2",
    ] {
        assert!(config.contains(&format!("{line}\n")), "missing {line} in:\n{config}");
    }

    let log = std::fs::read_to_string(cwd.join("run/loss_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,mean_loss,wall_seconds");
    assert_eq!(lines.len(), 11, "header plus one row per epoch:\n{log}");

    let manifest = std::fs::read_to_string(cwd.join("run/manifest.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    let fingerprint = json["dataset_fingerprint"].as_str().unwrap();
    assert_eq!(fingerprint.len(), 64);
    assert!(fingerprint.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(json["resolved_config"]["seed"], "0");
    assert!(cwd.join("run/checkpoint.json").is_file());
}

#[test]
fn unknown_loss_name_exits_2_listing_valid_names() {
    let tmp = TempDir::new().unwrap();
    let out = capseg(
        &["train", "--data", "data", "--out", "run", "--loss", "bogus"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    for name in ["adaptive_focal", "focal", "ag_bce"] {
        assert!(stderr.contains(name), "stderr misses {name}: {stderr}");
    }
}

#[test]
fn missing_inputs_exit_2() {
    let tmp = TempDir::new().unwrap();
    let cwd = tmp.path();
    let out = capseg(&["train", "--data", "nowhere", "--out", "run"], cwd);
    assert_eq!(out.status.code(), Some(2));

    let out = capseg(
        &["eval", "--checkpoint", "nope.json", "--data", "data", "--out", "e"],
        cwd,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn eval_writes_metrics_and_overlays() {
    let tmp = TempDir::new().unwrap();
    let cwd = tmp.path();
    synth(cwd, "train", "8", "3");
    synth(cwd, "test", "8", "77");
    run_ok(
        &[
            "train", "--data", "data", "--out", "run", "--input-size", "16", "--epochs", "2",
            "--batch", "4",
        ],
        cwd,
    );
    let stdout = run_ok(
        &[
            "eval", "--checkpoint", "run/checkpoint.json", "--data", "data", "--out", "e",
            "--largest-component",
        ],
        cwd,
    );
    assert!(stdout.contains("evaluated 2 cases (8 slices)"), "stdout: {stdout}");

    let metrics = std::fs::read_to_string(cwd.join("e/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "case_id,mean_dice,mean_hd95,slice_count");
    assert_eq!(lines.len(), 4, "2 case rows plus Mean:\n{metrics}");
    assert!(lines[3].starts_with("Mean,"), "last row is the mean:\n{metrics}");

    let overlays = std::fs::read_dir(cwd.join("e/overlays")).unwrap().count();
    assert_eq!(overlays, 8, "one overlay per slice");

    // Overlays are gray images with colored contours: the ground-truth
    // contour must contribute pure green or yellow somewhere.
    let img = image::open(cwd.join("e/overlays/case000_0.png")).unwrap().to_rgb8();
    let has_truth_color = img
        .pixels()
        .any(|p| p.0 == [0, 255, 0] || p.0 == [255, 255, 0]);
    assert!(has_truth_color, "no ground-truth contour color found");
}

#[test]
fn compare_columns_match_standalone_train_runs() {
    let tmp = TempDir::new().unwrap();
    let cwd = tmp.path();
    synth(cwd, "train", "8", "3");
    synth(cwd, "test", "4", "77");
    run_ok(
        &[
            "compare", "--data", "data", "--out", "cmp", "--input-size", "16", "--epochs", "2",
            "--batch", "4", "--seed", "9",
        ],
        cwd,
    );

    let table = std::fs::read_to_string(cwd.join("cmp/compare_loss.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "epoch,adaptive_focal,focal,ag_bce");
    assert_eq!(lines.len(), 3, "header plus one row per epoch:\n{table}");

    for (column, loss) in [(1, "adaptive_focal"), (2, "focal"), (3, "ag_bce")] {
        let out = format!("solo_{loss}");
        run_ok(
            &[
                "train", "--data", "data", "--out", &out, "--input-size", "16", "--epochs",
                "2", "--batch", "4", "--seed", "9", "--loss", loss,
            ],
            cwd,
        );
        let solo = std::fs::read_to_string(cwd.join(&out).join("loss_log.csv")).unwrap();
        for (row, line) in solo.lines().skip(1).enumerate() {
            let solo_loss = line.split(',').nth(1).unwrap();
            let compare_loss = lines[row + 1].split(',').nth(column).unwrap();
            assert_eq!(
                solo_loss, compare_loss,
                "{loss} epoch {} differs between compare and train",
                row + 1
            );
        }
    }

    let metrics = std::fs::read_to_string(cwd.join("cmp/compare_metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "loss,mean_dice,mean_hd95");
    assert_eq!(lines.len(), 4);
    assert!(cwd.join("cmp/loss_curves.png").is_file());
    for loss in ["adaptive_focal", "focal", "ag_bce"] {
        for artifact in ["loss_log.csv", "checkpoint.json", "config.txt", "metrics.csv"] {
            assert!(cwd.join("cmp").join(loss).join(artifact).is_file(), "{loss}/{artifact}");
        }
    }
}

#[test]
fn resume_extends_the_loss_history() {
    let tmp = TempDir::new().unwrap();
    let cwd = tmp.path();
    synth(cwd, "train", "8", "3");
    run_ok(
        &[
            "train", "--data", "data", "--out", "short", "--input-size", "16", "--epochs", "2",
            "--batch", "4",
        ],
        cwd,
    );
    run_ok(
        &[
            "train", "--data", "data", "--out", "long", "--resume", "short/checkpoint.json",
            "--epochs", "4",
        ],
        cwd,
    );

    let short = std::fs::read_to_string(cwd.join("short/loss_log.csv")).unwrap();
    let long = std::fs::read_to_string(cwd.join("long/loss_log.csv")).unwrap();
    let long_lines: Vec<&str> = long.lines().collect();
    assert_eq!(long_lines.len(), 5, "header plus four epochs:\n{long}");
    for (row, short_line) in short.lines().take(3).enumerate() {
        // Epoch number and loss agree; wall time is run-specific.
        let prefix = |l: &str| {
            let mut it = l.split(',');
            (it.next().unwrap().to_string(), it.next().unwrap().to_string())
        };
        assert_eq!(prefix(short_line), prefix(long_lines[row]), "row {row}");
    }

    let out = capseg(
        &[
            "train", "--data", "data", "--out", "x", "--resume", "short/checkpoint.json",
            "--epochs", "1",
        ],
        cwd,
    );
    assert_eq!(out.status.code(), Some(2), "epoch target below checkpoint");
}
