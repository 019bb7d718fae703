//! Dense attention vs the block-streaming sparse + linear forward at
//! N = 4096, d = 64 across the sparsity sweep. Pass `quick` for a smaller run.

use sla2::bench::{run_bench, BenchConfig};

fn main() -> sla2::Result<()> {
    let mut cfg = BenchConfig::default();
    if std::env::args().any(|a| a == "quick") {
        cfg.n = 1024;
        cfg.reps = 3;
        cfg.warmups = 1;
    }
    let report = run_bench(&cfg, 1)?;
    print!("{}", report.render_text());
    Ok(())
}
