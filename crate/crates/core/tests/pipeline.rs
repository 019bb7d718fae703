//! Run directories, prerequisites and reproducibility of the command layer.

mod common;

use std::fs;

use sla2::io::{cmd_gen_data, cmd_stage1, cmd_stage2, cmd_verify, Manifest};
use sla2::Error;

use common::tiny_config;

#[test]
fn stage2_without_stage1_fails_before_writing_anything() {
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let err = cmd_stage2(&cfg, out.path()).unwrap_err();
    assert!(matches!(err, Error::Missing(_)), "{err}");
    assert!(err.to_string().contains("stage1"));
    assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);
}

#[test]
fn stage2_rejects_a_budget_stage1_did_not_train() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cmd_gen_data(&cfg, out.path()).unwrap();
    cmd_stage1(&cfg, out.path()).unwrap();
    cfg.stage2.sparsity = 90.0;
    assert!(matches!(
        cmd_stage2(&cfg, out.path()),
        Err(Error::Missing(_))
    ));
}

#[test]
fn full_pipeline_writes_manifested_outputs() {
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let data = cmd_gen_data(&cfg, out.path()).unwrap();
    let s1 = cmd_stage1(&cfg, out.path()).unwrap();
    let s2 = cmd_stage2(&cfg, out.path()).unwrap();
    for run in [&data, &s1, &s2] {
        let m = Manifest::require(&run.dir, &run.manifest.command).unwrap();
        assert_eq!(m, run.manifest);
        assert!(!m.files.is_empty());
    }
    // one CSV row per optimizer step below the header
    let csv = fs::read_to_string(s2.dir.join("stage2_loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    assert_eq!(lines.count(), cfg.stage2.steps);
    let curves = fs::read_dir(s1.dir.join("curves")).unwrap().count();
    assert_eq!(
        curves,
        cfg.model.layers * cfg.model.heads * cfg.stage1.k_percents.len()
    );
    assert_eq!(s2.manifest.inputs["stage1"], s1.manifest.digest().unwrap());
    // no scratch directories left behind
    let names: Vec<String> = fs::read_dir(out.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().all(|n| !n.ends_with(".partial")), "{names:?}");
}

#[test]
fn gen_data_is_reproducible_across_output_roots() {
    let cfg = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = cmd_gen_data(&cfg, a.path()).unwrap();
    let rb = cmd_gen_data(&cfg, b.path()).unwrap();
    assert_eq!(ra.manifest, rb.manifest);
    assert_eq!(ra.dir.file_name(), rb.dir.file_name());
}

#[test]
fn verify_report_is_reproducible() {
    let cfg = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ra, rep) = cmd_verify(&cfg, a.path()).unwrap();
    let (rb, _) = cmd_verify(&cfg, b.path()).unwrap();
    assert!(rep.passed, "{}", rep.render_text());
    assert_eq!(
        fs::read(ra.dir.join("report.json")).unwrap(),
        fs::read(rb.dir.join("report.json")).unwrap()
    );
}
