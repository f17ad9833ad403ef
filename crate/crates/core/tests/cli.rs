use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cpseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = cpseg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// Small dataset plus labeled scores, shared by the tests below.
fn prepare(dir: &Path) -> (String, String) {
    let config = p(dir, "dataset.json");
    fs::write(
        &config,
        r#"{"seed": 3, "n_labeled": 12, "n_unlabeled": 4, "n_test": 4, "scene": {"height": 12, "width": 12}}"#,
    )
    .unwrap();
    ok(&["synth", "--config", &config, "--out", &p(dir, "data")]);
    let manifest = p(dir, "data/manifest.json");
    ok(&["score", "--manifest", &manifest, "--out", &p(dir, "scores")]);
    (manifest, p(dir, "scores/scores.json"))
}

#[test]
fn out_of_range_alpha_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, scores) = prepare(tmp.path());
    let out = cpseg(&["calibrate", "--manifest", &manifest, "--scores", &scores, "--alpha", "1.5", "--out", &p(tmp.path(), "q")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("q/quantile.cmtf").exists());
}

#[test]
fn missing_manifest_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cpseg(&["score", "--manifest", &p(tmp.path(), "nope.json"), "--out", &p(tmp.path(), "s")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn genmask_writes_masks_and_pgm() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, scores) = prepare(tmp.path());
    let q = p(tmp.path(), "q");
    ok(&["calibrate", "--manifest", &manifest, "--scores", &scores, "--out", &q]);
    ok(&["genmask", "--manifest", &manifest, "--quantile", &p(tmp.path(), "q/quantile.cmtf"), "--pgm", "--out", &p(tmp.path(), "m")]);
    let index: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("m/masks.json")).unwrap()).unwrap();
    assert_eq!(index["source"], "calibrated");
    let entries = index["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 4);
    let pgms = fs::read_dir(tmp.path().join("m/masks"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 4);
}

#[test]
fn report_lists_each_alpha() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, scores) = prepare(tmp.path());
    let mut runs = Vec::new();
    for alpha in ["0.1", "0.05", "0.01"] {
        let q = p(tmp.path(), &format!("q{alpha}"));
        ok(&["calibrate", "--manifest", &manifest, "--scores", &scores, "--alpha", alpha, "--out", &q]);
        let audit = p(tmp.path(), &format!("audit{alpha}"));
        ok(&["audit", "--manifest", &manifest, "--quantile", &format!("{q}/quantile.cmtf"), "--out", &audit]);
        runs.push(audit);
    }
    let mut args = vec!["report"];
    args.extend(runs.iter().map(String::as_str));
    let out = p(tmp.path(), "report");
    args.extend(["--out", &out]);
    ok(&args);
    let csv = fs::read_to_string(tmp.path().join("report/variants.csv")).unwrap();
    let alphas: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(alphas, ["0.1", "0.05", "0.01"]);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("pixel")));
}

#[test]
fn train_without_masks_needs_label_only_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, _) = prepare(tmp.path());
    let base = p(tmp.path(), "base.json");
    fs::write(&base, r#"{"epochs": 2, "stage_switch": 2}"#).unwrap();
    let out = cpseg(&["train", "--manifest", &manifest, "--config", &base, "--out", &p(tmp.path(), "t0")]);
    assert_eq!(out.status.code(), Some(2));

    let label_only = p(tmp.path(), "label_only.json");
    fs::write(&label_only, r#"{"epochs": 2, "stage_switch": 2, "lambda0": 0.0}"#).unwrap();
    ok(&["train", "--manifest", &manifest, "--config", &label_only, "--out", &p(tmp.path(), "t1")]);
    let history = fs::read_to_string(tmp.path().join("t1/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
}

#[test]
fn rerun_reproduces_calibration() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, scores) = prepare(tmp.path());
    let q = p(tmp.path(), "q");
    ok(&["calibrate", "--manifest", &manifest, "--scores", &scores, "--variant", "kmeans", "--clusters", "3", "--out", &q]);
    let again = p(tmp.path(), "again");
    ok(&["rerun", "--echo", &p(tmp.path(), "q/echo.json"), "--out", &again]);
    for f in ["quantile.cmtf", "quantile.json", "echo.json"] {
        assert_eq!(fs::read(tmp.path().join("q").join(f)).unwrap(), fs::read(tmp.path().join("again").join(f)).unwrap(), "{f}");
    }
}
