//! End-to-end tests of the `coad` binary: exit codes, config handling, the
//! resolved-config echo, and report determinism, all through the real CLI.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn coad() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coad"))
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_exit(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{what}: expected exit {code}\nstdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

/// Generates a small synthetic labeled dataset and returns its manifest path.
fn synth(dir: &Path, classes: usize, per_class: usize, image_size: usize) -> PathBuf {
    let out = coad()
        .args(["synth", "--out-dir"])
        .arg(dir)
        .args([
            "--classes",
            &classes.to_string(),
            "--per-class",
            &per_class.to_string(),
            "--image-size",
            &image_size.to_string(),
        ])
        .output()
        .expect("run synth");
    assert_exit(&out, 0, "synth");
    let manifest = PathBuf::from(stdout(&out).trim().to_string());
    assert!(manifest.exists(), "synth did not write {}", manifest.display());
    manifest
}

/// Trains a small model through the CLI and returns the checkpoint path.
fn train_tiny(manifest: &Path, out_dir: &Path, extra: &[&str]) -> PathBuf {
    let out = coad()
        .args(["train", "--manifest"])
        .arg(manifest)
        .args(["--out-dir"])
        .arg(out_dir)
        .args([
            "--variant",
            "vit-cm-dwt",
            "--epochs",
            "1",
            "--input-size",
            "32",
            "--concept-dim",
            "8",
            "--heads",
            "1",
            "--ff-width",
            "32",
            "--batch-size",
            "8",
            "--quiet",
        ])
        .args(extra)
        .output()
        .expect("run train");
    assert_exit(&out, 0, "train");
    let checkpoint = PathBuf::from(stdout(&out).trim().to_string());
    assert!(checkpoint.exists(), "train did not write {}", checkpoint.display());
    checkpoint
}

#[test]
fn train_smoke_run_on_8_images_under_2_minutes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), 2, 4, 64);

    // Reference-default model dimensions; only epochs is reduced.
    let start = Instant::now();
    let out = coad()
        .args(["train", "--manifest"])
        .arg(&manifest)
        .args(["--out-dir"])
        .arg(dir.path().join("run"))
        .args(["--variant", "vit-cm-dwt", "--epochs", "1", "--quiet"])
        .output()
        .expect("run train");
    let elapsed = start.elapsed();
    assert_exit(&out, 0, "train smoke");
    assert!(
        elapsed < Duration::from_secs(120),
        "1-epoch smoke train on 8 images took {elapsed:?} (limit 2 min)"
    );
    let checkpoint = PathBuf::from(stdout(&out).trim().to_string());
    assert!(checkpoint.exists());
    assert!(
        stderr(&out).contains("resolved-config [train]:"),
        "train must echo its resolved config"
    );
}

#[test]
fn detect_flags_planted_outlier_with_exit_0() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), 3, 8, 32);
    let checkpoint = train_tiny(&manifest, &dir.path().join("run"), &[]);

    // Nine identical majority crops plus one with a very different color:
    // even a 1-epoch model separates them on color features.
    let crops = dir.path().join("crops");
    std::fs::create_dir_all(&crops).unwrap();
    let majority = coad_test_image([0.85, 0.15, 0.15]);
    let outlier = coad_test_image([0.10, 0.25, 0.90]);
    for i in 0..9 {
        majority.save_png(crops.join(format!("crop_{i:02}.png"))).unwrap();
    }
    outlier.save_png(crops.join("crop_04b.png")).unwrap(); // sorts to index 5

    let out = coad()
        .args(["detect", "--checkpoint"])
        .arg(&checkpoint)
        .args(["--crops"])
        .arg(&crops)
        .args(["--features", "color", "--method", "boxplot", "--row-id", "shelf-9"])
        .output()
        .expect("run detect");
    assert_exit(&out, 0, "detect with planted outlier");
    let verdict: serde_json::Value = serde_json::from_str(stdout(&out).trim()).expect("JSON");
    assert_eq!(verdict["flagged"], serde_json::Value::Bool(true));
    assert_eq!(verdict["anomaly_index"], serde_json::json!(5));
    assert_eq!(verdict["row_id"], serde_json::json!("shelf-9"));
    assert!(stderr(&out).contains("resolved-config [detect]:"));
}

#[test]
fn detect_clean_row_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), 3, 8, 32);
    let checkpoint = train_tiny(&manifest, &dir.path().join("run"), &[]);

    // All crops identical: zero spread, nothing beyond the fence.
    let crops = dir.path().join("crops");
    std::fs::create_dir_all(&crops).unwrap();
    let same = coad_test_image([0.4, 0.6, 0.3]);
    for i in 0..6 {
        same.save_png(crops.join(format!("crop_{i:02}.png"))).unwrap();
    }

    let out = coad()
        .args(["detect", "--checkpoint"])
        .arg(&checkpoint)
        .args(["--crops"])
        .arg(&crops)
        .output()
        .expect("run detect");
    assert_exit(&out, 3, "detect on identical crops");
    let verdict: serde_json::Value = serde_json::from_str(stdout(&out).trim()).expect("JSON");
    assert_eq!(verdict["flagged"], serde_json::Value::Bool(false));
}

#[test]
fn detect_with_too_few_crops_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), 3, 8, 32);
    let checkpoint = train_tiny(&manifest, &dir.path().join("run"), &[]);

    let crops = dir.path().join("crops");
    std::fs::create_dir_all(&crops).unwrap();
    coad_test_image([0.5, 0.5, 0.5]).save_png(crops.join("only.png")).unwrap();

    let out = coad()
        .args(["detect", "--checkpoint"])
        .arg(&checkpoint)
        .args(["--crops"])
        .arg(&crops)
        .output()
        .expect("run detect");
    assert_exit(&out, 2, "detect with one crop");
}

#[test]
fn detect_requires_crops_or_shelf() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), 3, 8, 32);
    let checkpoint = train_tiny(&manifest, &dir.path().join("run"), &[]);

    let out = coad()
        .args(["detect", "--checkpoint"])
        .arg(&checkpoint)
        .output()
        .expect("run detect");
    assert_exit(&out, 2, "detect without input source");
}

#[test]
fn unknown_toml_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), 2, 4, 32);
    let config = dir.path().join("train.toml");
    std::fs::write(&config, "variant = \"vit-cm\"\nepochs = 1\nbogus_knob = 7\n").unwrap();

    let out = coad()
        .args(["train", "--manifest"])
        .arg(&manifest)
        .args(["--config"])
        .arg(&config)
        .args(["--out-dir"])
        .arg(dir.path().join("run"))
        .output()
        .expect("run train");
    assert_exit(&out, 1, "train with unknown TOML key");
    assert!(
        stderr(&out).contains("bogus_knob"),
        "error should name the offending key:\n{}",
        stderr(&out)
    );
}

#[test]
fn evaluate_missing_checkpoints_are_listed_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), 3, 8, 32);

    let start = Instant::now();
    let out = coad()
        .args(["evaluate", "--manifest"])
        .arg(&manifest)
        .args(["--checkpoint", "/nonexistent/model-a.safetensors"])
        .args(["--checkpoint", "/nonexistent/model-b.safetensors"])
        .args(["--out-dir"])
        .arg(dir.path().join("eval"))
        .output()
        .expect("run evaluate");
    assert_exit(&out, 1, "evaluate with missing checkpoints");
    let err = stderr(&out);
    // Both paths named in one shot, and the failure is immediate (no
    // training/eval work happened first).
    assert!(err.contains("model-a.safetensors"), "stderr:\n{err}");
    assert!(err.contains("model-b.safetensors"), "stderr:\n{err}");
    assert!(start.elapsed() < Duration::from_secs(10));
}

#[test]
fn evaluate_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), 4, 12, 32);
    let checkpoint = train_tiny(&manifest, &dir.path().join("run"), &[]);

    let run = |out_dir: &Path| -> Vec<u8> {
        let out = coad()
            .args(["evaluate", "--manifest"])
            .arg(&manifest)
            .args(["--checkpoint"])
            .arg(&checkpoint)
            .args(["--count", "8", "--n-majority", "4", "--seed", "13"])
            .args(["--selections", "color,both", "--methods", "boxplot"])
            .args(["--out-dir"])
            .arg(out_dir)
            .output()
            .expect("run evaluate");
        assert_exit(&out, 0, "evaluate");
        assert!(stderr(&out).contains("resolved-config [evaluate]:"));
        let report = out_dir.join("report.csv");
        assert!(report.exists());
        // The report is also echoed to stdout for piping.
        let bytes = std::fs::read(&report).unwrap();
        assert!(stdout(&out).contains(&String::from_utf8_lossy(&bytes).into_owned()));
        bytes
    };

    let first = run(&dir.path().join("eval-a"));
    let second = run(&dir.path().join("eval-b"));
    assert!(!first.is_empty());
    assert_eq!(first, second, "seeded evaluate reruns must be byte-identical");

    // Report header records the set geometry.
    let text = String::from_utf8(first).unwrap();
    assert!(text.contains("n_majority=4"), "report header:\n{text}");
    assert!(text.contains("seed=13"), "report header:\n{text}");
    assert!(text.lines().any(|l| l.starts_with("vit-cm-dwt,color,boxplot,")));
}

#[test]
fn embed_cache_hits_on_second_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), 2, 6, 32);
    let checkpoint = train_tiny(&manifest, &dir.path().join("run"), &[]);
    let cache_dir = dir.path().join("cache");

    let run = || -> serde_json::Value {
        let out = coad()
            .args(["embed-cache", "--checkpoint"])
            .arg(&checkpoint)
            .args(["--manifest"])
            .arg(&manifest)
            .args(["--features", "color", "--cache-dir"])
            .arg(&cache_dir)
            .output()
            .expect("run embed-cache");
        assert_exit(&out, 0, "embed-cache");
        serde_json::from_str(stdout(&out).trim()).expect("JSON summary")
    };

    let cold = run();
    assert_eq!(cold["objects"], serde_json::json!(12));
    assert_eq!(cold["cache_hits"], serde_json::json!(0));
    assert_eq!(cold["computed"], serde_json::json!(12));

    let warm = run();
    assert_eq!(warm["cache_hits"], serde_json::json!(12));
    assert_eq!(warm["computed"], serde_json::json!(0));
}

#[test]
fn unknown_subcommand_usage_exits_2() {
    let out = coad().arg("frobnicate").output().expect("run");
    assert_exit(&out, 2, "unknown subcommand");
}

/// Tiny solid-color PNG helper (saved via the library so the byte layout
/// matches what the CLI reads back).
fn coad_test_image(rgb: [f32; 3]) -> coad::object_image::ObjectImage {
    coad::object_image::ObjectImage::solid(rgb, 32, 32).unwrap()
}
