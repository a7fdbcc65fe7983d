//! End-to-end runs of the `relflow` binary on a small dataset.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn relflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relflow")).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = relflow(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn small_model(dir: &Path) {
    ok(dir, &["gen", "--out", "ds", "--train-per-class", "24", "--test-per-class", "6"]);
    ok(dir, &["train", "--data", "ds", "--out", "w.bin", "--epochs", "3", "--report", "train.json"]);
}

#[test]
fn full_command_set_runs_and_echoes_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_model(dir);
    let train = json(&dir.join("train.json"));
    assert_eq!(train["config"]["epochs"], 3);
    assert_eq!(train["config"]["seed"], 7);
    assert!(dir.join("train.json.timing.json").exists());

    let cloud = "ds/test/table/0000.xyz";
    let out = ok(dir, &["explain", "--model", "w.bin", "--input", cloud, "--out", "s.ply"]);
    assert!(out.contains("predicted"));
    assert!(std::fs::read_to_string(dir.join("s.ply")).unwrap().starts_with("ply\n"));
    ok(dir, &["explain", "--model", "w.bin", "--input", cloud, "--layer", "SA1-conv2", "--out", "s.json"]);
    assert_eq!(json(&dir.join("s.json"))["layer"], "SA1-conv2");

    ok(dir, &["eval-plane", "--model", "w.bin", "--data", "ds", "--out", "plane.json"]);
    let plane = json(&dir.join("plane.json"));
    assert_eq!(plane["config"]["command"], "eval-plane");
    assert_eq!(plane["tau"], 0.15);
    let sheet = plane["classes"].as_array().unwrap().iter().find(|c| c["name"] == "plane-sheet").unwrap();
    assert_eq!(sheet["c_p"], 1.0);

    ok(dir, &["eval-part", "--model", "w.bin", "--data", "ds", "--tiers", "red", "--out", "parts.json"]);
    assert!(!json(&dir.join("parts.json"))["parts"].as_array().unwrap().is_empty());

    ok(dir, &["segment", "--model", "w.bin", "--data", "ds", "--class", "table", "--calibration-count", "8", "--out", "seg.json"]);
    assert_eq!(json(&dir.join("seg.json"))["classes"].as_array().unwrap().len(), 1);

    let out = ok(dir, &["attack", "--model", "w.bin", "--data", "ds", "--regions", "2", "--neighbors", "10", "--out", "a.json"]);
    assert!(out.contains("per class at N=2, K=10"));
    let a = json(&dir.join("a.json"));
    assert_eq!(a["grid"].as_array().unwrap().len(), 1);
    assert_eq!(a["config"]["mode"], "salient");
    let timing = json(&dir.join("a.json.timing.json"));
    assert!(timing["grid"][0]["mean_time_s"].as_f64().unwrap() > 0.0);
    // Wall-clock figures stay out of the report itself.
    assert!(!std::fs::read_to_string(dir.join("a.json")).unwrap().contains("time"));
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let usage = relflow(dir, &["attack", "--regions", "many"]);
    assert_eq!(usage.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&usage.stderr).contains("Usage"));
    let missing = relflow(dir, &["eval-plane", "--model", "nope.bin", "--data", "nope"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(relflow(dir, &["--help"]).status.code(), Some(0));
}

#[test]
fn environment_seed_changes_the_data() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let gen = |out: &str, seed: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_relflow"))
            .args(["gen", "--out", out, "--train-per-class", "2", "--test-per-class", "1"])
            .env("RELFLOW_SEED", seed)
            .current_dir(dir)
            .output()
            .unwrap();
        assert!(o.status.success());
        std::fs::read(dir.join(out).join("test/ball/0000.xyz")).unwrap()
    };
    assert_eq!(gen("a", "3"), gen("b", "3"));
    assert_ne!(gen("c", "3"), gen("d", "4"));
}
