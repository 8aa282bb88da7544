//! End-to-end CLI tests: exit-code contract, artifact layout, and
//! byte-identical summaries across reruns and worker counts.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_exitctrl"))
}

fn write_small_config(dir: &Path, extra_verify: &str) -> std::path::PathBuf {
    let config = format!(
        r#"{{
  "problem": {{ "catalog": "poisson1d", "params": {{ "R": 1.0 }} }},
  "sim": {{ "dt": 0.002, "t_max": 6.0, "n_paths": 2000, "master_seed": 11,
           "exit_correction": "bridge-corrected" }},
  "grid": {{ "nodes_per_axis": [101], "max_policy_iterations": 30,
            "max_inner_iterations": 20000, "tolerance": 1e-6,
            "upwind": false, "damping": 0.5 }},
  "x0": [0.0]{extra_verify}
}}"#
    );
    let path = dir.join("config.json");
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn hjb_happy_path_writes_field_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path(), "");
    let out = dir.path().join("run1");
    let status = bin()
        .args(["hjb", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("field.csv").exists());
    assert!(out.join("summary.json").exists());
    assert!(out.join("manifest.json").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["sup_residual"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn value_summary_near_half_and_byte_identical_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path(), "");
    let mut summaries = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "4")] {
        let out = dir.path().join(name);
        let status = bin()
            .args(["value", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .env("EXITCTRL_THREADS", threads)
            .status()
            .unwrap();
        assert!(status.success());
        summaries.push(std::fs::read(out.join("summary.json")).unwrap());
    }
    assert_eq!(
        summaries[0], summaries[1],
        "summaries differ across EXITCTRL_THREADS"
    );
    let parsed: serde_json::Value = serde_json::from_slice(&summaries[0]).unwrap();
    let value = parsed["value"].as_f64().unwrap();
    assert!((value - 0.5).abs() < 0.05, "u_hat(0) = {value}");
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{ "problem": { "catalog": "no-such-entry" } }"#).unwrap();
    let status = bin()
        .args(["hjb", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn verify_exit_codes_follow_check_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    // Passing comparison check.
    let ok_config = write_small_config(dir.path(), "");
    let status = bin()
        .args(["verify", "--suite", "comparison", "--config"])
        .arg(&ok_config)
        .arg("--out")
        .arg(dir.path().join("ok"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    // Injected sign-flip fixture forces a failing report and exit code 1.
    let bad_dir = tempfile::tempdir().unwrap();
    let bad_config = write_small_config(
        bad_dir.path(),
        r#",
  "verify": { "inject_failure": "comparison-sign-flip" }"#,
    );
    let output = bin()
        .args(["verify", "--suite", "comparison", "--config"])
        .arg(&bad_config)
        .arg("--out")
        .arg(bad_dir.path().join("bad"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(bad_dir.path().join("bad/report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report[0]["status"]["status"], "fail");
}

#[test]
fn report_merges_and_deduplicates_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path(), "");
    let root = dir.path().join("runs");
    for name in ["r1", "r2"] {
        let status = bin()
            .args(["verify", "--suite", "comparison", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(root.join(name))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let status = bin().arg("report").arg(&root).status().unwrap();
    assert!(status.success());
    let merged: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(root.join("merged_report.json")).unwrap(),
    )
    .unwrap();
    let entries = merged["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    assert!(entries[0]["duplicate_of"].is_null());
    assert_eq!(entries[1]["duplicate_of"], "r1");
}

#[test]
fn runtime_numerical_errors_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path(), "");
    // x0 outside the closed domain is a runtime precondition violation.
    let status = bin()
        .args(["cost", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .args(["--x0", "5.0"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn simulate_exports_exit_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path(), "");
    let out = dir.path().join("sim");
    let status = bin()
        .args(["simulate", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--paths", "50"])
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.join("exits.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "path_id,exit_step,tau,censored,exit_point_0");
    assert_eq!(lines.count(), 50);
}
