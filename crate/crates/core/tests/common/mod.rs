#![allow(dead_code)]

use sla2::io::RunConfig;

/// A pipeline small enough to run in a couple of seconds: N = 32, two heads
/// of width 8, one layer, a handful of optimizer steps everywhere.
pub fn tiny_config() -> RunConfig {
    RunConfig::from_json(TINY).expect("tiny config parses")
}

pub const TINY: &str = r#"{
  "seed": 11,
  "model": {"seq_len": 32, "d_model": 16, "heads": 2, "layers": 1, "bq": 8, "bk": 4, "diffusion_steps": 1000},
  "data": {"train_sequences": 4, "val_sequences": 2, "signal": {"components": 3, "max_frequency": 4}},
  "pretrain": {"steps": 3, "batch": 2, "lr": 0.001},
  "qkv": {"timesteps": [100, 600], "sequences": 1},
  "stage1": {"k_percents": [25, 50], "tau": 0.1, "steps": 4, "batch": 2, "lr": 0.001},
  "stage2": {"sparsity": 75, "steps": 3, "batch": 2, "lr": 0.0001, "val_timesteps": [200, 700]},
  "verify": {"seeds": 2, "soft_rows": 50},
  "bench": {"n": 256, "d": 16, "bq": 16, "bk": 16, "sparsities": [75, 90], "reps": 1, "warmups": 0}
}"#;
