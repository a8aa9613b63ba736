//! End-to-end tests of the `riv` binary: exit codes, JSON shape, and
//! byte-level determinism of stdout.

use std::path::PathBuf;
use std::process::{Command, Output};

use nalgebra::DVector;
use riv_core::data_io::{write_csv, ColumnSchema};
use riv_core::sim::{generate, SimSetting};

fn riv() -> Command {
    Command::new(env!("CARGO_BIN_EXE_riv"))
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = riv();
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Three strong instruments, the third invalid; returns the CSV path.
fn demo_csv(dir: &tempfile::TempDir) -> PathBuf {
    let mut pi = DVector::zeros(3);
    pi[2] = -0.7;
    let setting = SimSetting::assemble(
        "demo",
        1.0,
        0.6,
        0.0,
        400,
        DVector::from_element(3, 0.6),
        pi,
        1,
    )
    .expect("setting assembles");
    let data = generate(&setting, 42);
    let path = dir.path().join("demo.csv");
    let schema = ColumnSchema::new(
        "y",
        "d",
        vec!["z1".into(), "z2".into(), "z3".into()],
        vec!["x1".into()],
    );
    write_csv(&data, &path, &schema).expect("csv written");
    path
}

fn demo_args(path: &std::path::Path) -> Vec<String> {
    vec![
        "ci".into(),
        "--input".into(),
        path.display().to_string(),
        "--outcome".into(),
        "y".into(),
        "--treatment".into(),
        "d".into(),
        "--instruments".into(),
        "z1,z2,z3".into(),
        "--covariates".into(),
        "x1".into(),
        "--samples".into(),
        "200".into(),
        "--bootstrap-reps".into(),
        "300".into(),
        "--seed".into(),
        "5".into(),
    ]
}

#[test]
fn ci_happy_path_emits_expected_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = demo_csv(&dir);
    let args = demo_args(&path);
    let arg_refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = run(&arg_refs, &[]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let json = stdout_json(&out);
    for key in ["searching", "sampling", "selection"] {
        assert!(json.get(key).is_some(), "missing key {key}");
    }
    assert_eq!(json["searching"]["method"], "searching");
    assert!(json["searching"]["grid"]["count"].as_u64().unwrap() >= 1);
    // The invalid instrument is voted out: valid set is {1, 2}, 1-based.
    assert_eq!(json["selection"]["v_hat"], serde_json::json!([1, 2]));
    // Default run omits the voting matrix and the per-draw intervals.
    assert!(json["selection"].get("pi").is_none());
    assert!(json["sampling"].get("per_sample").is_none());
}

#[test]
fn ci_stdout_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let path = demo_csv(&dir);
    let args = demo_args(&path);
    let arg_refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let a = run(&arg_refs, &[]);
    let b = run(&arg_refs, &[]);
    assert_eq!(a.stdout, b.stdout);
    // Thread cap must not change the report.
    let c = run(&arg_refs, &[("RIV_THREADS", "1")]);
    assert_eq!(a.stdout, c.stdout);
}

#[test]
fn ci_emit_flags_extend_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = demo_csv(&dir);
    let mut args = demo_args(&path);
    args.push("--emit-selection".into());
    args.push("--emit-samples".into());
    let arg_refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = run(&arg_refs, &[]);
    let json = stdout_json(&out);
    let pi = json["selection"]["pi"].as_array().expect("voting matrix");
    assert_eq!(pi.len(), json["selection"]["s_hat"].as_array().unwrap().len());
    assert_eq!(
        json["sampling"]["per_sample"].as_array().unwrap().len(),
        200
    );
}

#[test]
fn ci_empty_intervals_exit_two() {
    // Two relevant instruments with far-apart ratios: no effect value can
    // satisfy the majority-over-two condition, so with a fixed lambda both
    // intervals come back empty.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.csv");
    let mut rows = String::from("y,d,z1,z2\n");
    let mut state = 1u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
    };
    for _ in 0..200 {
        let z1 = next();
        let z2 = next();
        let e = 0.05 * next();
        let d = z1 + z2 + 0.05 * next();
        let y = d + 5.0 * z2 + e;
        rows.push_str(&format!("{y},{d},{z1},{z2}\n"));
    }
    std::fs::write(&path, rows).unwrap();

    let out = run(
        &[
            "ci",
            "--input",
            path.to_str().unwrap(),
            "--outcome",
            "y",
            "--treatment",
            "d",
            "--instruments",
            "z1,z2",
            "--lambda",
            "1.0",
            "--samples",
            "100",
            "--bootstrap-reps",
            "200",
        ],
        &[],
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "stdout: {} stderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    let json = stdout_json(&out);
    assert_eq!(json["searching"]["empty"], true);
    assert_eq!(json["sampling"]["ci"]["empty"], true);
    let warnings = json["warnings"].as_array().unwrap();
    assert!(
        warnings
            .iter()
            .any(|w| w.as_str().unwrap().contains("plurality rule may be violated")),
        "warnings: {warnings:?}"
    );
}

#[test]
fn ci_out_of_range_valid_set_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = demo_csv(&dir);
    let mut args = demo_args(&path);
    args.push("--valid-set".into());
    args.push("7".into());
    let arg_refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let out = run(&arg_refs, &[]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert_eq!(err["error"]["kind"], "containment");
}

#[test]
fn ci_summary_input_works() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("summary.json");
    std::fs::write(
        &path,
        r#"{
            "n": 100,
            "WtW": [[100.0, 0.0], [0.0, 100.0]],
            "WtY": [5.0, 60.0],
            "WtD": [1.0, 50.0],
            "sigma_eps_sq": 1.0,
            "sigma_delta_sq": 1.0,
            "sigma_eps_delta": 0.5
        }"#,
    )
    .unwrap();
    let out = run(
        &[
            "ci",
            "--summary",
            path.to_str().unwrap(),
            "--samples",
            "100",
            "--bootstrap-reps",
            "200",
        ],
        &[],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let json = stdout_json(&out);
    // Only the second instrument is strong enough to be relevant.
    assert_eq!(json["selection"]["s_hat"], serde_json::json!([2]));

    // Robust covariance cannot run on summary input.
    let out = run(
        &["ci", "--summary", path.to_str().unwrap(), "--robust"],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ci_config_file_merges_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = demo_csv(&dir);
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"alpha": 0.10, "samples": 150, "bootstrap_reps": 200, "seed": 5}"#,
    )
    .unwrap();
    let out = run(
        &[
            "ci",
            "--input",
            path.to_str().unwrap(),
            "--outcome",
            "y",
            "--treatment",
            "d",
            "--instruments",
            "z1,z2,z3",
            "--covariates",
            "x1",
            "--config",
            config.to_str().unwrap(),
            "--alpha",
            "0.05",
        ],
        &[],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let json = stdout_json(&out);
    // Flag wins over file; file fills what flags left unset.
    assert_eq!(json["alpha"], 0.05);
    assert_eq!(json["sampling"]["M"], 150);
}

#[test]
fn select_reports_voting_and_errors_without_relevance() {
    let dir = tempfile::tempdir().unwrap();
    let path = demo_csv(&dir);
    let out = run(
        &[
            "select",
            "--input",
            path.to_str().unwrap(),
            "--outcome",
            "y",
            "--treatment",
            "d",
            "--instruments",
            "z1,z2,z3",
            "--covariates",
            "x1",
            "--emit-selection",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(0));
    let json = stdout_json(&out);
    assert_eq!(json["s_hat"], serde_json::json!([1, 2, 3]));
    assert_eq!(json["v_hat"], serde_json::json!([1, 2]));
    assert!(json["pi"].is_array());

    // Treatment exactly orthogonal to the instrument: zero strength.
    let weak = dir.path().join("weak.csv");
    std::fs::write(
        &weak,
        "y,d,z1\n1.0,1.0,1.0\n2.0,1.0,-1.0\n0.5,-1.0,1.0\n1.5,-1.0,-1.0\n",
    )
    .unwrap();
    let out = run(
        &[
            "select",
            "--input",
            weak.to_str().unwrap(),
            "--outcome",
            "y",
            "--treatment",
            "d",
            "--instruments",
            "z1",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "no_relevant_instruments");
}

#[test]
fn simulate_is_deterministic_and_sweeps() {
    let args = [
        "simulate",
        "--setting",
        "S2",
        "--gamma0",
        "0.5",
        "--tau",
        "0.2,0.4",
        "--n",
        "300,400",
        "--reps",
        "3",
        "--seed",
        "7",
        "--methods",
        "oracle,naive",
    ];
    let a = run(&args, &[]);
    assert_eq!(
        a.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&a.stderr)
    );
    let b = run(&args, &[]);
    assert_eq!(a.stdout, b.stdout, "repeated runs differ");
    let c = run(&args, &[("RIV_THREADS", "2")]);
    assert_eq!(a.stdout, c.stdout, "thread cap changed the table");

    let text = String::from_utf8(a.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5, "header plus four sweep rows: {text}");
    assert!(lines[0].starts_with("setting,gamma0,tau,n,reps,oracle_coverage"));

    let out = run(
        &["simulate", "--setting", "NOPE", "--reps", "2"],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));

    // Invalid sweep values are rejected with exit 1 as well.
    let out = run(
        &["simulate", "--setting", "S1", "--tau", "abc", "--reps", "2"],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));

    // Help is not an error.
    let out = run(&["--help"], &[]);
    assert_eq!(out.status.code(), Some(0));
}
