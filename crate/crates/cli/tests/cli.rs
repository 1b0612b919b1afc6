//! End-to-end tests against the built `nlsid` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn nlsid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlsid")).args(args).output().expect("binary must start")
}

fn preset() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets/rnn_feedback_d3.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_json(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn small_config(dir: &Path, horizon: usize) -> PathBuf {
    let mut cfg = preset();
    cfg["horizon"] = json!(horizon);
    cfg["seeds"] = json!([0, 1]);
    cfg["export_trajectory"] = json!(true);
    cfg["output_dir"] = json!(dir.join("out"));
    write_json(dir, "config.json", &cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn version_prints_package_version() {
    let out = nlsid(&["version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn single_step_experiment_writes_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 1);
    let out = nlsid(&["experiment", s(&cfg), "--workers", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for case in ["zero", "iid_sphere", "decaying_sphere"] {
        let csv = fs::read_to_string(tmp.path().join("out").join(case).join("seed_0/metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2, "header plus one data row");
        assert!(tmp.path().join("out").join(case).join("avg_regret.svg").exists());
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 6);
}

#[test]
fn malformed_and_invalid_configs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(nlsid(&["experiment", s(&bad)]).status.code(), Some(2));

    let mut cfg = preset();
    cfg["horizon"] = json!(0);
    let zero = write_json(tmp.path(), "zero.json", &cfg);
    assert_eq!(nlsid(&["experiment", s(&zero)]).status.code(), Some(2));

    let mut cfg = preset();
    cfg["unknown_field"] = json!(1);
    let extra = write_json(tmp.path(), "extra.json", &cfg);
    assert_eq!(nlsid(&["experiment", s(&extra)]).status.code(), Some(2));

    assert_eq!(nlsid(&["experiment", s(&tmp.path().join("missing.json"))]).status.code(), Some(2));
}

#[test]
fn check_flags_unstable_linear_plant() {
    let tmp = tempfile::tempdir().unwrap();
    let file = json!({
        "model": { "kind": "linear", "n": 2, "m": 1, "a": [[1.2, 0.0], [0.0, 1.2]], "b": [[1.0], [0.0]] },
        "controller": { "gain": { "explicit": [[0.0, 0.0]] }, "sign": "negative" }
    });
    let path = write_json(tmp.path(), "model.json", &file);
    let out = nlsid(&["check", s(&path), "--json"]);
    assert_eq!(out.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], json!(false));
    let item = |name: &str| report["checks"].as_array().unwrap().iter().find(|c| c["name"] == name).unwrap().clone();
    assert_eq!(item("closed_loop_stable")["passed"], json!(false));
    assert_eq!(item("rho_probe")["passed"], json!(false));
    assert_eq!(item("jacobian")["passed"], json!(true));
}

#[test]
fn check_passes_stable_linear_plant_and_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let file = json!({
        "model": { "kind": "linear", "n": 2, "m": 1, "a": [[0.5, 0.1], [0.0, 0.4]], "b": [[1.0], [0.0]] },
        "controller": { "gain": { "explicit": [[0.0, 0.0]] }, "sign": "negative" }
    });
    let path = write_json(tmp.path(), "model.json", &file);
    let out = nlsid(&["check", s(&path), "--out", s(tmp.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(tmp.path().join("check_report.json").exists());
}

#[test]
fn identify_rejects_empty_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let traj = tmp.path().join("traj.csv");
    fs::write(&traj, "t,x_1,x_2,u_1,y_1,y_2,w_1,w_2\n").unwrap();
    let model = write_json(tmp.path(), "model.json", &preset()["model"]);
    let est = write_json(tmp.path(), "est.json", &preset()["estimator"]);
    let out = nlsid(&["identify", s(&traj), s(&model), s(&est), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn identify_replay_is_deterministic_and_matches_online_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 3000);
    assert!(nlsid(&["experiment", s(&cfg), "--no-svg"]).status.success());
    let traj = tmp.path().join("out/iid_sphere/seed_0/trajectory.csv");
    // The experiment config doubles as model and estimator file.
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        fs::create_dir_all(dir).unwrap();
        let out = nlsid(&["identify", s(&traj), s(&cfg), s(&cfg), "--out", s(dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["estimate.json", "prediction_error.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let est: Value = serde_json::from_str(&fs::read_to_string(a.join("estimate.json")).unwrap()).unwrap();
    assert_eq!(est["samples"], json!(3000));
    // Replaying the recorded trajectory reproduces the online run's final squared error.
    let metrics = fs::read_to_string(tmp.path().join("out/iid_sphere/seed_0/metrics.csv")).unwrap();
    let header: Vec<&str> = metrics.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|c| *c == "param_err").unwrap();
    let last: f64 = metrics.lines().last().unwrap().split(',').nth(col).unwrap().parse().unwrap();
    let replayed = est["reference_error"].as_f64().unwrap().powi(2);
    assert!((replayed - last).abs() <= 1e-12 * last.max(1.0), "{replayed} vs {last}");
    assert_eq!(fs::read_to_string(a.join("prediction_error.csv")).unwrap().lines().count(), 3001);
}

#[test]
fn manifest_reruns_to_identical_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 500);
    assert!(nlsid(&["experiment", s(&cfg), "--workers", "2"]).status.success());
    let replay = tmp.path().join("replay");
    let manifest = tmp.path().join("out/manifest.json");
    assert!(nlsid(&["experiment", s(&manifest), "--out", s(&replay), "--workers", "1"]).status.success());
    for rel in ["zero/seed_1/metrics.csv", "iid_sphere/aggregate.csv", "decaying_sphere/seed_0/trajectory.csv", "iid_sphere/param_err.svg"] {
        assert_eq!(fs::read(tmp.path().join("out").join(rel)).unwrap(), fs::read(replay.join(rel)).unwrap(), "{rel}");
    }
}
