//! Exit statuses and flags of the `sla2` binary.

mod common;

use std::fs;
use std::process::Command;

fn sla2(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sla2"))
        .args(args)
        .env("SLA2_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn tiny_config_file(dir: &std::path::Path) -> String {
    let path = dir.join("tiny.json");
    fs::write(&path, common::TINY).unwrap();
    path.display().to_string()
}

#[test]
fn verify_passes_and_an_injected_fault_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_file(dir.path());
    let out = dir.path().join("runs").display().to_string();
    let ok = sla2(&["verify", "--config", &cfg, "--out", &out]);
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stdout)
    );
    let bad = sla2(&[
        "verify",
        "--config",
        &cfg,
        "--out",
        &out,
        "--fault",
        "dv-assign",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    let text = String::from_utf8_lossy(&bad.stdout);
    assert!(text.contains("FAIL") && text.contains("dV"), "{text}");
}

#[test]
fn bad_config_is_an_error_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"stage1": {"k_percents": []}}"#).unwrap();
    let out = dir.path().join("runs");
    let r = sla2(&[
        "gen-data",
        "--config",
        &cfg.display().to_string(),
        "--out",
        &out.display().to_string(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_prerequisite_names_the_command_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_file(dir.path());
    let out = dir.path().join("runs").display().to_string();
    let r = sla2(&[
        "stage2",
        "--config",
        &cfg,
        "--out",
        &out,
        "--sparsity",
        "75",
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("run `stage1` first"));
}

#[test]
fn report_summarizes_runs_under_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config_file(dir.path());
    let out = dir.path().join("runs").display().to_string();
    assert_eq!(
        sla2(&["gen-data", "--config", &cfg, "--out", &out])
            .status
            .code(),
        Some(0)
    );
    let r = sla2(&["report", "--config", &cfg, "--out", &out]);
    assert_eq!(r.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&r.stdout).contains("gen-data"));
}
