use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_excontrol");

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "info").output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn assert_valid(doc: &Value, schema: &str) {
    let text = std::fs::read_to_string(schema_dir().join(format!("{schema}.schema.json"))).unwrap();
    let schema: Value = serde_json::from_str(&text).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{e} at {}", e.instance_path())).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

fn expect_error(out: &Output, status: i32, code: &str) {
    assert_eq!(out.status.code(), Some(status), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(out);
    assert_valid(&v, "error");
    assert_eq!(v["error"]["code"], code);
}

/// Writes the fixture rows accepted by `keep(d, t)`, with `y` mapped by `f`.
fn filtered_csv(dir: &Path, name: &str, keep: impl Fn(u8, u8) -> bool, f: impl Fn(f64) -> f64) -> PathBuf {
    let text = std::fs::read_to_string(fixtures().join("composite.csv")).unwrap();
    let mut lines = text.lines();
    let mut out = format!("{}\n", lines.next().unwrap());
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let (d, t): (u8, u8) = (cols[0].parse().unwrap(), cols[1].parse().unwrap());
        if keep(d, t) {
            let y = f(cols[2].parse().unwrap());
            out.push_str(&format!("{},{},{},{}\n", cols[0], cols[1], y, cols[3..].join(",")));
        }
    }
    let path = dir.join(name);
    std::fs::write(&path, out).unwrap();
    path
}

#[test]
fn estimate_matches_golden_file() {
    let input = fixtures().join("composite.csv");
    let out = run(&["estimate", "--input", input.to_str().unwrap(), "--estimand", "tau,psi,xi"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let golden = fixtures().join("composite.estimate.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &out.stdout).unwrap();
    }
    let expected = std::fs::read(&golden).unwrap();
    assert!(out.stdout == expected, "output differs from {}", golden.display());

    let v = stdout_json(&out);
    assert_valid(&v, "estimate");
    assert_eq!(v["results"].as_array().unwrap().len(), 6);
    assert_eq!(v["nuisance"][0]["m0_pooled"], true);
    assert_eq!(v["nuisance"][1]["m0_pooled"], false);
    // paths are not part of the echoed config
    assert!(v["config"].get("input").is_none());
}

#[test]
fn no_external_rows_with_full_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let input = filtered_csv(dir.path(), "trial.csv", |d, _| d == 1, |y| y);
    let out = run(&["estimate", "--input", input.to_str().unwrap(), "--method", "full"]);
    expect_error(&out, 3, "OVERLAP_NO_EXTERNAL");

    let trial = run(&["estimate", "--input", input.to_str().unwrap(), "--method", "trial"]);
    assert!(trial.status.success());
    assert_valid(&stdout_json(&trial), "estimate");
}

#[test]
fn binary_outcome_forces_known_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let input = filtered_csv(dir.path(), "binary.csv", |_, _| true, |y| f64::from(u8::from(y > 1.5)));
    let out = run(&["estimate", "--input", input.to_str().unwrap(), "--ratio", "loglinear", "--method", "full"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let v = stdout_json(&out);
    assert_valid(&v, "estimate");
    assert_eq!(v["data"]["outcome_kind"], "binary");
    assert_eq!(v["nuisance"][0]["ratio_mode"], "known_one");
    assert!(String::from_utf8_lossy(&out.stderr).contains("known_one"));
}

#[test]
fn diagnose_with_zero_bias_bound() {
    let input = fixtures().join("composite.csv");
    let out = run(&["diagnose", "--input", input.to_str().unwrap(), "--bias-bound", "0"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_valid(&v, "diagnose");
    assert_eq!(v["bias"]["lambda_abs_bound"], 0.0);
    assert_eq!(v["exchangeability"]["df"], 2);
    assert_eq!(v["exchangeability"]["coefficients_tested"], serde_json::json!(["d:x1", "d:x2"]));
}

#[test]
fn diagnose_without_external_controls_reports_empty_cell() {
    let dir = tempfile::tempdir().unwrap();
    let input = filtered_csv(dir.path(), "trial.csv", |d, _| d == 1, |y| y);
    let out = run(&["diagnose", "--input", input.to_str().unwrap()]);
    expect_error(&out, 3, "EMPTY_CELL");
}

#[test]
fn treated_only_trial() {
    let dir = tempfile::tempdir().unwrap();
    let input = filtered_csv(dir.path(), "treated.csv", |d, t| d == 0 || t == 1, |y| y);
    let out = run(&["estimate", "--input", input.to_str().unwrap(), "--method", "treated-only"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let v = stdout_json(&out);
    assert_valid(&v, "estimate");
    assert_eq!(v["results"][0]["estimate"]["method"], "treated_only");
    assert_eq!(v["nuisance"][0]["treated_only"], true);

    let mixed = run(&["estimate", "--input", input.to_str().unwrap(), "--method", "treated-only,trial"]);
    expect_error(&mixed, 2, "CONFIG_ERROR");
}

#[test]
fn configuration_errors_exit_with_two() {
    let input = fixtures().join("composite.csv");
    let i = input.to_str().unwrap();
    expect_error(&run(&["estimate", "--input", i, "--B", "100"]), 2, "CONFIG_ERROR");
    expect_error(&run(&["estimate", "--input", i, "--level", "1.5"]), 2, "CONFIG_ERROR");
    expect_error(&run(&["estimate", "--input", i, "--estimand", "zeta"]), 2, "CONFIG_ERROR");
    expect_error(&run(&["estimate"]), 2, "CONFIG_ERROR");
    expect_error(&run(&["simulate", "--scenario", "v", "--reps", "2"]), 2, "CONFIG_ERROR");
    expect_error(&run(&["estimate", "--input", "/nonexistent.csv"]), 3, "IO_ERROR");
    let schema = r#"{"outcome":"response","treatment":"t","source":"d"}"#;
    expect_error(&run(&["estimate", "--input", i, "--schema", schema]), 3, "MISSING_COLUMN");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixtures().join("composite.csv");
    let cfg = dir.path().join("run.json");
    let body = serde_json::json!({
        "input": input,
        "estimands": ["psi"],
        "methods": ["full"],
        "level": 0.9,
        "side": "greater",
        "models": {"m0": {"family": "gaussian", "terms": ["raw(0)"]}}
    });
    std::fs::write(&cfg, body.to_string()).unwrap();
    let out = run(&["estimate", "--config", cfg.to_str().unwrap(), "--level", "0.8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let v = stdout_json(&out);
    assert_valid(&v, "estimate");
    assert_eq!(v["config"]["level"], 0.8);
    assert_eq!(v["config"]["side"], "greater");
    assert_eq!(v["config"]["estimands"], serde_json::json!(["psi"]));
    assert_eq!(v["results"][0]["level"], 0.8);
    assert_eq!(v["results"][0]["sidedness"], "greater");

    std::fs::write(&cfg, r#"{"levle": 0.9}"#).unwrap();
    expect_error(&run(&["estimate", "--config", cfg.to_str().unwrap()]), 2, "CONFIG_ERROR");
}

#[test]
fn simulate_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let boxplot = dir.path().join("bias.csv");
    let start = Instant::now();
    let out = run(&[
        "simulate", "--scenario", "i", "--reps", "50", "--n", "500", "--seed", "3", "--boxplot",
        boxplot.to_str().unwrap(),
    ]);
    assert!(start.elapsed() < Duration::from_secs(60));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let v = stdout_json(&out);
    assert_valid(&v, "simulate");
    assert_eq!(v["reports"][0]["reps"], 50);
    let csv = std::fs::read_to_string(&boxplot).unwrap();
    assert_eq!(csv.lines().count(), 1 + 50 * 3);
}

#[test]
fn simulate_is_deterministic_across_runs_and_jobs() {
    let args = ["simulate", "--scenario", "ii", "--reps", "40", "--n", "300", "--seed", "11", "--estimand", "tau,xi"];
    let a = run(&args);
    let b = run(&args);
    let c = run(&[&args[..], &["--jobs", "3"]].concat());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);
    let other_seed = run(&["simulate", "--scenario", "ii", "--reps", "40", "--n", "300", "--seed", "12"]);
    assert_ne!(a.stdout, other_seed.stdout);
}

#[test]
fn bootstrap_is_deterministic_across_jobs() {
    let input = fixtures().join("composite.csv");
    let i = input.to_str().unwrap();
    let base = ["estimate", "--input", i, "--variance", "bootstrap", "--B", "60", "--seed", "5"];
    let a = run(&base);
    let b = run(&[&base[..], &["--jobs", "2"]].concat());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let v = stdout_json(&a);
    assert_valid(&v, "estimate");
    assert_eq!(v["results"][0]["variance_method"], "bootstrap");
    assert_eq!(v["results"][0]["bootstrap"]["reps"], 60);
}

#[test]
fn simulate_all_scenarios() {
    let out = run(&["simulate", "--scenario", "all", "--reps", "20", "--n", "300"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_valid(&v, "simulate");
    let names: Vec<&str> = v["reports"].as_array().unwrap().iter().map(|r| r["scenario"].as_str().unwrap()).collect();
    assert_eq!(names, ["i", "ii", "iii", "iv"]);
}

#[test]
fn report_renders_tables() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("est.json");
    let input = fixtures().join("composite.csv");
    let out = run(&["estimate", "--input", input.to_str().unwrap(), "--out", json.to_str().unwrap()]);
    assert!(out.status.success() && out.stdout.is_empty());
    let text = run(&["report", "--input", json.to_str().unwrap()]);
    assert!(text.status.success());
    let text = String::from_utf8(text.stdout).unwrap();
    assert!(text.contains("tau (full data)") && text.contains("tau (trial based)"));

    std::fs::write(&json, r#"{"command": "unknown"}"#).unwrap();
    expect_error(&run(&["report", "--input", json.to_str().unwrap()]), 2, "CONFIG_ERROR");
}
