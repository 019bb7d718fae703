//! The whole command chain on a small model: data and dense pretraining,
//! router training, fine-tuning at two sparsities, then the summary table.
//! Pass an output directory, or it writes under `target/pipeline-example`.

use std::path::PathBuf;

use sla2::io::{cmd_gen_data, cmd_report, cmd_stage1, cmd_stage2, RunConfig};

const CONFIG: &str = r#"{
  "model": {"seq_len": 64, "d_model": 32, "heads": 2, "layers": 1, "bq": 8, "bk": 8, "diffusion_steps": 1000},
  "data": {"train_sequences": 16, "val_sequences": 4, "signal": {"components": 3, "max_frequency": 4}},
  "pretrain": {"steps": 100, "batch": 4, "lr": 0.001},
  "qkv": {"timesteps": [100, 500, 900], "sequences": 2},
  "stage1": {"k_percents": [25, 50], "tau": 0.1, "steps": 200, "batch": 2, "lr": 0.001},
  "stage2": {"sparsity": 75, "steps": 30, "batch": 4, "lr": 0.0001, "val_timesteps": [200, 500, 800]}
}"#;

fn main() -> sla2::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/pipeline-example")
        });
    let cfg = RunConfig::from_json(CONFIG)?;
    for run in [cmd_gen_data(&cfg, &out)?, cmd_stage1(&cfg, &out)?] {
        println!("{}\n", run.summary);
    }
    for sparsity in [75.0, 50.0] {
        let mut c = cfg.clone();
        c.stage2.sparsity = sparsity;
        println!("{}\n", cmd_stage2(&c, &out)?.summary);
    }
    println!("{}", cmd_report(&cfg, &out)?.summary);
    Ok(())
}
