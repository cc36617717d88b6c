//! End-to-end checks of the `also` binary: outputs, overrides and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn also(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_also"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ALSO_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

#[test]
fn budget_prints_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = also(&["budget", "--method", "evoprompt", "--turns", "21"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let rows = stdout_json(&out);
    assert_eq!(rows[0]["optimizer_calls"], 25);
    assert_eq!(rows[0]["agent_calls"], 42);
    let all = stdout_json(&also(&["budget"], dir.path()));
    assert_eq!(all.as_array().unwrap().len(), 5);
}

#[test]
fn run_writes_resolved_config_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let out = also(
        &["run", "--compact", "--rounds", "30", "--seed", "4", "--eta", "5", "--output-dir", "o"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    assert_eq!(summary["turns"], 30);
    let o = dir.path().join("o");
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(o.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["selector"]["eta"], 5.0);
    assert_eq!(cfg["seeds"], serde_json::json!([4]));
    assert_eq!(std::fs::read_to_string(o.join("logs.jsonl")).unwrap().lines().count(), 1);
    assert_eq!(std::fs::read_to_string(o.join("turns.csv")).unwrap().lines().count(), 31);
    assert!(o.join("checkpoint.json").exists());
}

#[test]
fn output_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_also"))
        .args(["run", "--compact", "--rounds", "5", "--method", "exp3"])
        .current_dir(dir.path())
        .env("ALSO_OUTPUT_DIR", "from_env")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("from_env/logs.jsonl").exists());
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"rounds": 12, "env": {"kind": "drifting"}, "network": {"hidden": 8}, "embedding": {"kind": "synthetic", "dim": 8, "seed": 0}}"#,
    )
    .unwrap();
    let out = also(&["run", "--config", "cfg.json", "--rounds", "7", "--output-dir", "o"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["turns"], 7);
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["env"]["kind"], "drifting");
    assert_eq!(cfg["network"]["hidden"], 8);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["run", "--rounds", "0"],
        vec!["run", "--method", "nope"],
        vec!["run", "--ablation", "no_context", "--method", "exp3"],
        vec!["run", "--config", "missing.json"],
        vec!["budget", "--turns", "0"],
        vec!["no-such-command"],
    ] {
        let out = also(&args, dir.path());
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = also(
        &["run", "--compact", "--env", "remote", "--remote-address", "127.0.0.1:1", "--rounds", "3"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn checkpoint_export_then_import() {
    let dir = tempfile::tempdir().unwrap();
    let out = also(
        &["checkpoint", "export", "--compact", "--rounds", "30", "--out", "cp.json", "--output-dir", "a"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = also(
        &["checkpoint", "import", "--compact", "--rounds", "10", "--from", "cp.json", "--output-dir", "b"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("b/logs.jsonl").exists());

    std::fs::write(dir.path().join("bad.json"), r#"{"version": "other"}"#).unwrap();
    let out = also(&["checkpoint", "import", "--compact", "--from", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = also(&["checkpoint", "export", "--method", "exp3", "--out", "x.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn experiment_and_ablate_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["--compact", "--rounds", "40", "--seed", "0", "--seed", "1"];
    let mut args = vec!["experiment", "--variant", "full", "--variant", "exp3", "--output-dir", "e"];
    args.extend(base);
    let out = also(&args, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("e/report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 4);

    let mut args = vec!["ablate", "--output-dir", "a"];
    args.extend(base);
    let out = also(&args, dir.path());
    assert_eq!(out.status.code(), Some(0));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/report.json")).unwrap()).unwrap();
    assert_eq!(report["manifest"]["variants"].as_array().unwrap().len(), 5);
}

#[test]
fn calibrate_drift_reports_the_band() {
    let dir = tempfile::tempdir().unwrap();
    let out = also(&["calibrate-drift", "--seeds", "2"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["in_band"], true);
    assert_eq!(v["seeds"].as_array().unwrap().len(), 2);
}
