//! Operation counts for the 1.3B video geometry across the sparsity sweep.

use sla2::accounting::{flops_sla2, render_table, Calibration};

fn main() -> sla2::Result<()> {
    let cal = Calibration::load()?;
    println!(
        "calibration: N={} d={} calls={} (solved {:.4})",
        cal.geometry.n,
        cal.geometry.d,
        cal.geometry.calls(),
        cal.solved_calls()
    );
    let reports = [0.85, 0.90, 0.95, 0.97]
        .iter()
        .map(|&s| flops_sla2(&cal.geometry, s, cal.bq, cal.bk))
        .collect::<sla2::Result<Vec<_>>>()?;
    print!("{}", render_table(&reports));
    println!("{}", serde_json::to_string_pretty(&reports)?);
    Ok(())
}
