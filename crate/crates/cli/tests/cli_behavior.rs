//! Exit codes and end-to-end command flows.

use std::path::PathBuf;
use std::process::Command;

use serde_json::Value;

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_stepchain")
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

#[test]
fn usage_errors_exit_one() {
    let output = Command::new(binary())
        .arg("--definitely-not-a-flag")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let output = Command::new(binary())
        .args(["run", "--snapshot"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let output = Command::new(binary()).arg("--help").output().unwrap();
    assert_eq!(output.status.code(), Some(0));
}

#[test]
fn missing_snapshot_exits_two_with_no_output() {
    let output = Command::new(binary())
        .args(["run", "--snapshot", "/nonexistent/snap", "--question", "q"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(output.stdout.is_empty(), "partial output on failure");
    assert!(!output.stderr.is_empty());
}

#[test]
fn wrong_kind_file_exits_two() {
    let out = tempfile::tempdir().unwrap();
    let output = Command::new(binary())
        .args(["build", "--experience"])
        .arg(fixture("gated_skills.jsonl")) // wrong kind on purpose
        .arg("--skills")
        .arg(fixture("gated_skills.jsonl"))
        .arg("--out")
        .arg(out.path().join("snap"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn audit_command_reports_constructed_pass_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("lenient.cfg");
    std::fs::write(&config_path, "strict = false\n").unwrap();
    let snap = dir.path().join("snap");
    let empty_skills = dir.path().join("skills.jsonl");
    std::fs::write(&empty_skills, "").unwrap();

    let status = Command::new(binary())
        .args(["build", "--experience"])
        .arg(fixture("audit_experience.jsonl"))
        .arg("--skills")
        .arg(&empty_skills)
        .arg("--config")
        .arg(&config_path)
        .arg("--out")
        .arg(&snap)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());

    let output = Command::new(binary())
        .args(["audit", "--snapshot"])
        .arg(&snap)
        .args(["--sample", "25", "--seed", "0"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let report: Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(report["sampled"], 25);
    assert_eq!(report["passed"], 22);
    assert!((report["pass_fraction"].as_f64().unwrap() - 0.88).abs() < 1e-12);

    // same seed, same report
    let again = Command::new(binary())
        .args(["audit", "--snapshot"])
        .arg(&snap)
        .args(["--sample", "25", "--seed", "0"])
        .output()
        .unwrap();
    assert_eq!(output.stdout, again.stdout);
}

#[test]
fn reranker_training_round_trips_into_build() {
    let dir = tempfile::tempdir().unwrap();
    let params_path = dir.path().join("reranker.json");
    let output = Command::new(binary())
        .args(["train-reranker", "--triplets"])
        .arg(fixture("retrieval_triplets.jsonl"))
        .arg("--out")
        .arg(&params_path)
        .args(["--epochs", "50", "--lr", "0.1"])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let report: Value = serde_json::from_slice(&output.stdout).unwrap();
    assert!(report["final_loss"].as_f64().unwrap() < report["initial_loss"].as_f64().unwrap());
    let saved: Value =
        serde_json::from_str(&std::fs::read_to_string(&params_path).unwrap()).unwrap();
    assert_eq!(saved["feature_version"], 1);
    assert_eq!(saved["weights"].as_array().unwrap().len(), 6);

    let snap = dir.path().join("snap");
    let status = Command::new(binary())
        .args(["build", "--experience"])
        .arg(fixture("case_experience.jsonl"))
        .arg("--skills")
        .arg(fixture("case_skills.jsonl"))
        .arg("--reranker")
        .arg(&params_path)
        .arg("--out")
        .arg(&snap)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(snap.join("reranker.json").exists());
}

#[test]
fn eval_plain_report_lists_full_row_only() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("snap");
    let status = Command::new(binary())
        .args(["build", "--experience"])
        .arg(fixture("case_experience.jsonl"))
        .arg("--skills")
        .arg(fixture("case_skills.jsonl"))
        .arg("--out")
        .arg(&snap)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());

    let output = Command::new(binary())
        .args(["eval", "--snapshot"])
        .arg(&snap)
        .arg("--benchmark")
        .arg(fixture("case_benchmark.jsonl"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let report: Value = serde_json::from_slice(&output.stdout).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["name"], "full");
    assert_eq!(rows[0]["accuracy"], 1.0);
    // timings are excluded unless requested
    assert!(rows[0].get("mean_wall_ms").is_none());

    // build then run end to end: the case question resolves to D
    let case: Value = serde_json::from_str(
        std::fs::read_to_string(fixture("case_benchmark.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    let output = Command::new(binary())
        .args(["run", "--snapshot"])
        .arg(&snap)
        .args([
            "--question",
            case["question"].as_str().unwrap(),
            "--options",
            &serde_json::to_string(&case["options"]).unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let bundle: Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(bundle["answer"]["label"], "D");
}
