//! End-to-end checks of the `fv` binary: run/oracle/diag subcommands,
//! override flags, exit codes and byte-identical rerun outputs.

use std::path::Path;
use std::process::Command;

fn fv() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fv"))
}

fn write_scenario(dir: &Path, assertion: &str) -> std::path::PathBuf {
    let json = format!(
        r#"{{
        "name": "cli_smoke",
        "dynamics": {{"finite_chain": {{"rates": [[-1.0, 1.0], [1.0, -1.0]]}}}},
        "potential": {{"table": [0.0, 1.0]}},
        "kernel": "fleming_viot",
        "test_function": {{"indicator": {{"state": 1}}}},
        "initial_law": {{"weights": [0.5, 0.5]}},
        "n_grid": [8, 32, 128],
        "horizon": 1.0,
        "obs_times": [0.5, 1.0],
        "replicas": 200,
        "base_seed": 5,
        "assertions": {assertion}
    }}"#
    );
    let path = dir.join("cli_smoke.json");
    std::fs::write(&path, json).unwrap();
    path
}

#[test]
fn run_writes_outputs_and_exits_zero_on_passing_assertions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), r#"{"l2_slope_range": [-0.8, -0.2]}"#);
    let out = fv()
        .args(["run"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "stdout: {stdout}");
    assert!(stdout.contains("PASS l2_slope_range"), "stdout: {stdout}");
    let csv_path = dir.path().join("cli_smoke_results.csv");
    let csv1 = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv1.starts_with("scenario,N,time,statistic,value,stderr,replicas,seed,fingerprint"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cli_smoke_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["completed_n"], serde_json::json!([8, 32, 128]));

    // rerun: byte-identical CSV body
    let out2 = fv()
        .args(["run"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out2.status.success());
    assert_eq!(csv1, std::fs::read_to_string(&csv_path).unwrap());
}

#[test]
fn run_exits_nonzero_on_failing_assertion() {
    let dir = tempfile::tempdir().unwrap();
    // an impossible slope band for a genuine N^{-1/2} statistic
    let cfg = write_scenario(dir.path(), r#"{"l2_slope_range": [0.4, 0.6]}"#);
    let out = fv()
        .args(["run"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL l2_slope_range"));
}

#[test]
fn seed_override_changes_the_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), "{}");
    let csv_for = |seed: &str, sub: &Path| {
        let out = fv()
            .args(["run"])
            .arg(&cfg)
            .args(["--seed", seed, "--replicas", "50", "--out"])
            .arg(sub)
            .output()
            .unwrap();
        assert!(out.status.success());
        std::fs::read_to_string(sub.join("cli_smoke_results.csv")).unwrap()
    };
    let a = csv_for("1", &dir.path().join("a"));
    let b = csv_for("2", &dir.path().join("b"));
    assert_ne!(a, b);
    // the seed column reflects the override
    assert!(a.lines().nth(1).unwrap().contains(",50,1,"));
}

#[test]
fn oracle_subcommand_prints_eigen_elements() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), "{}");
    let out = fv().args(["oracle"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    // lambda = (3 - sqrt 5)/2 on this scenario
    assert!(stdout.contains("lambda = 0.381966011250"), "stdout: {stdout}");
    assert!(stdout.contains("c_minus"));
}

#[test]
fn diag_subcommand_reports_structural_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), "{}");
    let out = fv().args(["diag"]).arg(&cfg).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "stdout: {stdout}");
    assert!(stdout.contains("PASS mean_field_identity"));
    assert!(stdout.contains("PASS discrete_derivative_envelope"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn malformed_config_reports_position_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, "{\n  \"name\": \"x\",\n  !\n}").unwrap();
    let out = fv().args(["run"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 3"), "stderr: {stderr}");
}
