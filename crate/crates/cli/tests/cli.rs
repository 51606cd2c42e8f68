use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn atso(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atso")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

const SMALL: &str = r#""generator": {"height": 16, "width": 16, "n_labeled": 3, "n_reference": 6, "n_test": 3},
    "hyper": {"epochs": 2}, "T": 1"#;

#[test]
fn sweep_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!(r#"{{{SMALL}, "output_dir": "out", "sweep": {{"num_seeds": 2}}}}"#));
    let out = atso(&["sweep", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bundle = dir.path().join("out/bundle.json");
    assert!(dir.path().join("out/table1.csv").exists());
    let table = dir.path().join("appendix.csv");
    let out = atso(&["report", "--bundle", bundle.to_str().unwrap(), "--layout", "appendixA", "--out", table.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(table).unwrap().starts_with("generation,M1@R1"));
}

#[test]
fn run_transfer_and_gen_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!(r#"{{{SMALL}, "shift": {{"contrast": 1.3}}}}"#));
    let run_dir = dir.path().join("run");
    let out = atso(&["transfer", "--config", &cfg, "--out", run_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(run_dir.join("generations.csv")).unwrap().contains("global_dsc"));
    let data = dir.path().join("data");
    assert!(atso(&["gen", "--config", &cfg, "--out", data.to_str().unwrap()]).status.success());
    assert!(data.join("target").exists());
    assert!(atso(&["run", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]).status.success());
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"sweep": {"num_seeds": -1}}"#);
    let out = atso(&["sweep", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweep.num_seeds"));
    assert_eq!(atso(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = atso(&["report", "--bundle", missing.to_str().unwrap(), "--layout", "json", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
}
