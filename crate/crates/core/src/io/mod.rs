//! Run configuration, manifests, checkpoints and the workflow commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::Result;

pub use commands::{
    cmd_bench, cmd_gen_data, cmd_report, cmd_stage1, cmd_stage2, cmd_verify, run_dir, RunOutput,
};
pub use config::RunConfig;
pub use manifest::Manifest;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `step,loss` with one row per step.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    fs::write(path, out)?;
    Ok(())
}
