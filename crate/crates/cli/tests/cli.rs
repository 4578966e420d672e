use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn exe(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_affine-lab"));
    cmd.args(args).env_remove("AFFINE_LAB_WORKERS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, doc: &Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, doc.to_string()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn small_ou() -> Value {
    json!({
        "params": {"a": 1.0, "beta22": -1.0},
        "grid": {"dt": 0.0078125},
        "mc": {"n_paths": 400, "seed": 3},
        "validate": {"checks": ["semigroup", "affine_formula"], "t_list": [0.5]}
    })
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn validate_small_ou_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_ou());
    let out = tmp.path().join("out");
    let o = exe(
        &["validate", "--config", &cfg, "--out", out.to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["pass"], true);
    for f in manifest["files"].as_array().unwrap() {
        assert!(out.join(f.as_str().unwrap()).exists());
    }
}

#[test]
fn missing_config_is_usage_error() {
    let o = exe(&["transform"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--config"));
}

#[test]
fn limit_with_nonnegative_beta22_is_rejected_before_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &json!({"params": {"a": 1.0, "beta22": 1.0}}));
    let out = tmp.path().join("out");
    let o = exe(
        &["limit", "--config", &cfg, "--out", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("beta22 < 0"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn beta12_cites_violated_clause() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &json!({"params": {"a": 1.0, "beta12": 0.5}}));
    let o = exe(&["transform", "--config", &cfg], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("(iv)"), "{}", stderr(&o));
}

#[test]
fn unknown_key_names_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &json!({"mc": {"n_path": 10}}));
    let o = exe(&["transform", "--config", &cfg], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mc.n_path"), "{}", stderr(&o));
}

#[test]
fn reruns_are_byte_identical_and_seed_matters() {
    let tmp = tempfile::tempdir().unwrap();
    let mut doc = small_ou();
    doc["simulate"] = json!({"n_paths": 3});
    let cfg = write_config(tmp.path(), &doc);
    let run = |name: &str, seed: &str, workers: &str| {
        let out = tmp.path().join(name);
        let o = exe(
            &[
                "simulate",
                "--config",
                &cfg,
                "--seed",
                seed,
                "--out",
                out.to_str().unwrap(),
            ],
            &[("AFFINE_LAB_WORKERS", workers)],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        files(&out)
    };
    let a = run("a", "5", "1");
    let b = run("b", "5", "2");
    let c = run("c", "6", "1");
    assert_eq!(a, b);
    let paths = |v: &[(String, Vec<u8>)]| v.iter().find(|f| f.0 == "paths.csv").unwrap().1.clone();
    assert_ne!(paths(&a), paths(&c));
    let text = String::from_utf8(paths(&a)).unwrap();
    assert!(text.starts_with("# "));
    assert!(text.contains("# seed: 5"));
}

#[test]
fn failing_check_exits_one_with_fail_line() {
    let tmp = tempfile::tempdir().unwrap();
    let mut doc = small_ou();
    doc["limit"] = json!({"theta_ladder": [2, 8], "modes": ["single"], "rate_rel_tol": 1e-9});
    doc["mc"]["n_paths"] = 50.into();
    let cfg = write_config(tmp.path(), &doc);
    let out = tmp.path().join("out");
    let o = exe(
        &["limit", "--config", &cfg, "--out", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("FAIL "), "{}", stderr(&o));
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["pass"], false);
}
