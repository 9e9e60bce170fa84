use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gauss_fluct::models::{build, BuilderSpec};
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gauss-fluct"));
    c.env("GAUSS_FLUCT_THREADS", "2");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn builder_model(dir: &Path, name: &str, builder: Value) -> PathBuf {
    let spec: BuilderSpec = serde_json::from_value(builder.clone()).unwrap();
    let dim = build(&spec).unwrap().dim();
    let src = json!({ "builder": builder });
    let file = json!({ "dim": dim, "generator": src, "covariance": src, "time_reversal": src, "label": name });
    let p = dir.join(format!("{name}.json"));
    std::fs::write(&p, serde_json::to_string_pretty(&file).unwrap()).unwrap();
    p
}

fn chain(dir: &Path) -> PathBuf {
    builder_model(dir, "chain", json!({ "name": "chain", "params": { "n_left": 32, "n_right": 32, "temps": [2.0, 1.0, 1.0] } }))
}

fn toy(dir: &Path) -> PathBuf {
    builder_model(dir, "toy", json!({ "name": "toy", "params": { "n": 16, "lam": 1.0 } }))
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn validate_chain_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let m = chain(dir.path());
    let out = dir.path().join("out");
    let o = run(&["--out", out.to_str().unwrap(), "validate", "--model", m.to_str().unwrap(), "--t-grid", "0:5:6"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = read_json(&out.join("validate.json"));
    assert_eq!(v["g4_ok"], json!(true));
    assert!(v["m_est"].as_f64().unwrap() > 0.0);
}

#[test]
fn validate_flags_missing_time_reversal() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("plain.json");
    let file = json!({
        "dim": 2,
        "generator": { "dense": [[1.0, 0.3], [-0.2, 0.8]] },
        "covariance": { "dense": [[1.0, 0.0], [0.0, 2.0]] },
    });
    std::fs::write(&p, file.to_string()).unwrap();
    let o = run(&["validate", "--model", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["g4_ok"], json!(false));
}

#[test]
fn scan_renyi_toy_vanishes_at_zero_and_one() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "--out", out.to_str().unwrap(),
        "scan-renyi", "--model", m.to_str().unwrap(), "--t", "1", "--t", "3", "--alpha-grid", "0:1:5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("renyi.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,alpha,e_t,in_domain"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 10);
    for r in &rows {
        if r[1] == 0.0 || r[1] == 1.0 {
            assert!(r[2].abs() < 1e-9, "{r:?}");
        }
        assert_eq!(r[3], 1.0);
    }
    assert!(out.join("domains.json").exists());
    let per_t = std::fs::read_to_string(out.join("renyi_t3.csv")).unwrap();
    assert!(per_t.starts_with("alpha,e_t,in_domain\n"));
    assert_eq!(per_t.lines().count(), 6);
}

#[test]
fn empty_grid_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path());
    let o = run(&["scan-renyi", "--model", m.to_str().unwrap(), "--t", "1", "--alpha-grid", "0:1:0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_model_is_structural_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{ \"dim\": 2, \"generator\": ").unwrap();
    let o = run(&["validate", "--model", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
}

#[test]
fn flow_csv_has_expected_columns() {
    let dir = tempfile::tempdir().unwrap();
    let m = chain(dir.path());
    let o = run(&["flow", "--model", m.to_str().unwrap(), "--t-grid", "0:2:3", "--quad-steps", "40"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,trace_Dt,lambda_min_Dt,lambda_max_Dt,mean_sigma,ent_balance_defect"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn mgf_output_round_trips_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let m = chain(dir.path());
    let out = dir.path().join("out");
    let args = [
        "--out", out.to_str().unwrap(), "--seed", "3",
        "mc", "mgf", "--model", m.to_str().unwrap(), "--t", "1", "--alpha", "0.5", "--n", "4000", "--steps", "64",
    ];
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("mc_mgf.json")).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    for k in ["estimate", "std_error", "oracle", "z_score"] {
        assert!(v[k].as_f64().unwrap().is_finite(), "{k}");
    }
    assert!(v["z_score"].as_f64().unwrap().abs() < 5.0);
    let again: Value = serde_json::from_str(&serde_json::to_string_pretty(&v).unwrap()).unwrap();
    assert_eq!(again, v);

    run(&args);
    assert_eq!(std::fs::read_to_string(out.join("mc_mgf.json")).unwrap(), text);
}

#[test]
fn asymptotics_and_rate_on_small_chain() {
    let dir = tempfile::tempdir().unwrap();
    let m = chain(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "--out", out.to_str().unwrap(),
        "asymptotics", "--model", m.to_str().unwrap(), "--horizon", "60", "--tol", "0.5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = read_json(&out.join("asymptotics.json"));
    assert!(v["omega_plus_sigma"].as_f64().unwrap() > 0.0);
    assert!(!v["atoms"].as_array().unwrap().is_empty());

    let o = run(&[
        "--out", out.to_str().unwrap(),
        "rate", "--model", m.to_str().unwrap(), "--horizon", "60", "--tol", "0.5", "--s-grid", "-0.2:0.2:5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("rate.csv")).unwrap();
    for l in csv.lines().skip(1) {
        let r: Vec<f64> = l.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(r[1] >= -1e-12);
        assert!(r[4].abs() < 1e-6, "{l}");
    }
}

#[test]
fn oracle_compare_toy_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path());
    let o = run(&["oracle-compare", "--model", m.to_str().unwrap(), "--t", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v[0]["max_abs_diff_e_t"].as_f64().unwrap() < 1e-8);
    assert!(v[0]["max_abs_diff_e_t_plus"].as_f64().unwrap() < 1e-8);
}
