use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_datelab")).args(args).output().unwrap()
}

fn out_arg(dir: &Path) -> &str {
    dir.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(run(&["paint"]).status.code(), Some(2));
}

#[test]
fn rho_sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "sweep", "--param", "rho", "--values", "0.1,0.25,0.5,1,2,4", "--samples", "8", "--out", out_arg(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "rho,mean_h,se_h,frechet");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("0.1,"));
}

#[test]
fn verify_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = run(&["verify", "--seed", "7", "--quick", "--out", out_arg(d.path())]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    }
    let ra = fs::read(a.path().join("verify.json")).unwrap();
    assert_eq!(ra, fs::read(b.path().join("verify.json")).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(v["checks"].as_array().unwrap().len(), 11);
}

#[test]
fn single_check_can_be_selected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["verify", "--check", "tweedie", "--out", out_arg(dir.path())]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(v["checks"][0]["name"], "tweedie");
    assert_eq!(run(&["verify", "--check", "nope"]).status.code(), Some(1));
}

#[test]
fn compare_prints_a_table_and_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["compare", "--seed", "7", "--samples", "10", "--out", out_arg(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("fixed") && stdout.contains("date"));
    assert!(dir.path().join("compare.csv").exists() && dir.path().join("compare.json").exists());
}

#[test]
fn train_then_sample_from_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("train.json");
    fs::write(&cfg_path, r#"{"model": {"kind": "desk"}, "prompt": 0, "train": {"steps": 30}}"#).unwrap();
    let train_dir = dir.path().join("train");
    let out = run(&["train", "--config", cfg_path.to_str().unwrap(), "--out", out_arg(&train_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let ckpt = train_dir.join("checkpoint.json");
    let sample_cfg = dir.path().join("sample.json");
    let body = serde_json::json!({"model": {"kind": "checkpoint", "path": ckpt}, "prompt": 0, "n_samples": 5});
    fs::write(&sample_cfg, body.to_string()).unwrap();
    let sample_dir = dir.path().join("sample");
    let out = run(&["sample", "--config", sample_cfg.to_str().unwrap(), "--out", out_arg(&sample_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(sample_dir.join("trace.csv")).unwrap().lines().count(), 101);
}
