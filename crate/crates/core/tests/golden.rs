//! The committed reference instance still matches both forward paths.

use std::path::PathBuf;

use sla2::attention::{sla2_forward_blockwise, sla2_forward_naive, ForwardOptions};
use sla2::autodiff::hard_routing;
use sla2::golden::GoldenInstance;
use sla2::router::RouterParams;

fn load() -> GoldenInstance {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("golden/attention_n64");
    GoldenInstance::read(&dir).expect("golden instance readable")
}

#[test]
fn golden_mask_is_reproduced_by_the_router() {
    let g = load();
    let routing = hard_routing(
        &g.inputs,
        &RouterParams::identity(g.index.d, 0.1),
        g.index.k_percent,
    )
    .unwrap();
    assert_eq!(routing.as_hard().unwrap(), &g.mask);
}

#[test]
fn dense_path_matches_golden_output() {
    let g = load();
    let out = sla2_forward_naive(
        &g.inputs,
        &g.routing(),
        &g.alpha,
        &ForwardOptions::default(),
    )
    .unwrap();
    assert!(out.max_abs_diff(&g.output) <= 1e-12);
}

#[test]
fn blockwise_path_matches_golden_branches_and_output() {
    let g = load();
    let (out, saved) = sla2_forward_blockwise(
        &g.inputs,
        &g.routing(),
        &g.alpha,
        &ForwardOptions::default(),
    )
    .unwrap();
    assert!(out.max_abs_diff(&g.output) <= 1e-10);
    assert!(saved.o_s.max_abs_diff(&g.o_s) <= 1e-10);
    assert!(saved.o_l.max_abs_diff(&g.o_l) <= 1e-10);
}
