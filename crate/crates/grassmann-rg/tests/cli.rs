//! End-to-end runs of the `grassmann-rg` binary: exit codes and reports.

use std::path::{Path, PathBuf};
use std::process::Command;

fn scratch_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("grassmann-rg-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create scratch dir");
    dir
}

fn run(experiment: &str, config: &str, dir: &Path, workers: usize) -> (i32, serde_json::Value) {
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, config).expect("write config");
    let out = dir.join(format!("out-{workers}"));
    let status = Command::new(env!("CARGO_BIN_EXE_grassmann-rg"))
        .arg(experiment)
        .arg("--config")
        .arg(&config_path)
        .arg("--workers")
        .arg(workers.to_string())
        .arg("--out")
        .arg(&out)
        .status()
        .expect("spawn binary");
    let report = std::fs::read_to_string(out.join("report.json"))
        .ok()
        .and_then(|text| serde_json::from_str(&text).ok())
        .unwrap_or(serde_json::Value::Null);
    (status.code().expect("exit code"), report)
}

#[test]
fn malformed_config_exits_with_config_error() {
    let dir = scratch_dir("malformed");
    let (code, _) = run("free_energy", r#"{"model":{"unknown_field":1}}"#, &dir, 1);
    assert_eq!(code, 1);
    let (code, _) = run("free_energy", "not json", &dir, 1);
    assert_eq!(code, 1);
}

#[test]
fn zero_coupling_free_energy_reports_zero_constant() {
    let dir = scratch_dir("zero");
    let (code, report) = run("free_energy", r#"{"model":{"u":[0,0,0,0]}}"#, &dir, 1);
    assert_eq!(code, 0, "report: {report}");
    assert_eq!(report["status"], "ok");
    assert_eq!(report["schema_version"], "1.0.0");
    let j_end = report["result"]["j_end"].as_f64().expect("j_end present");
    assert!(j_end.abs() < 1e-14, "j_end = {j_end}");
}

#[test]
fn oversized_coupling_aborts_the_flow() {
    let dir = scratch_dir("abort");
    let (code, report) = run("free_energy", r#"{"model":{"u":[100,100,100,100]}}"#, &dir, 1);
    assert_eq!(code, 3, "report: {report}");
}

#[test]
fn reports_agree_across_worker_counts() {
    let dir = scratch_dir("workers");
    let config = r#"{"model":{"u":[0.001,-0.001,0.001,0.001]}}"#;
    let (code_one, one) = run("irflow", config, &dir, 1);
    let (code_many, many) = run("irflow", config, &dir, 4);
    assert_eq!(code_one, code_many);
    let strip = |mut v: serde_json::Value| {
        v["config"]["workers"] = serde_json::Value::Null;
        v["config"]["out"] = serde_json::Value::Null;
        v
    };
    assert_eq!(strip(one), strip(many));
}

#[test]
fn covariance_experiment_writes_its_tables() {
    let dir = scratch_dir("covariance");
    let (code, report) = run("covariance", "{}", &dir, 1);
    assert_eq!(code, 0, "report: {report}");
    for name in ["full_symbols", "uv_cutoff", "ir_cutoff"] {
        let path = dir.join("out-1").join("tables").join(format!("{name}.csv"));
        let text = std::fs::read_to_string(&path).expect("table written");
        assert!(text.lines().count() > 1, "{name} has no rows");
    }
}
