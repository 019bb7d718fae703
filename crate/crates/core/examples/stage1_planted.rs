//! Trains a router on planted-structure attention inputs and compares it with
//! the pooled-score heuristic at the same budget.

use std::time::Instant;

use sla2::train::planted::{planted_instances, PlantedSpec};
use sla2::train::stage1::{stage1_loss, train_head, AttentionSample, Stage1Config};

fn main() -> sla2::Result<()> {
    let spec = PlantedSpec::default();
    let k_percent = 5.0;
    let to_samples = |seed| -> sla2::Result<Vec<AttentionSample>> {
        planted_instances(&spec, 16, seed)?
            .into_iter()
            .map(|p| AttentionSample::new(p.inputs))
            .collect()
    };
    let train = to_samples(1)?;
    let held_out = to_samples(2)?;
    let held: Vec<&AttentionSample> = held_out.iter().collect();

    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let mut cfg = Stage1Config {
        k_percents: vec![k_percent],
        tau: 0.1,
        steps,
        batch: 8,
        lr: 1e-3,
        seed: 3,
        train_projections: false,
    };
    let start = Instant::now();
    let (heuristic, _, _, _) = train_head(&train, k_percent, &cfg)?;
    cfg.train_projections = true;
    let (learned, losses, initial, last) = train_head(&train, k_percent, &cfg)?;
    let h = stage1_loss(&held, &heuristic, k_percent, false)?;
    let l = stage1_loss(&held, &learned, k_percent, false)?;
    println!(
        "soft-routing loss {initial:.5} -> {last:.5} over {} steps",
        losses.len()
    );
    println!("held-out hard Top-k MSE: heuristic {h:.5}, learned {l:.5}");
    println!(
        "reduction {:.1}% in {:.1?}",
        100.0 * (1.0 - l / h),
        start.elapsed()
    );
    Ok(())
}
