//! Training checkpoints and stage-1 router sets on disk: a JSON index plus one
//! RTEN1 file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::router::RouterParams;
use crate::rten::{read_matrix, write_matrix};
use crate::train::adam::{Adam, AdamConfig};
use crate::train::model::{ModelConfig, ParamSet, ToyModel};
use crate::train::stage1::{HeadRouting, Stage1Result};
use crate::train::trainer::TrainState;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const ROUTERS_FILE: &str = "routers.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    /// Optimizer steps taken; the next step has this index.
    pub step: u64,
    pub params: Vec<String>,
    /// Parameters with optimizer moments (a subset of `params`).
    pub moments: Vec<String>,
}

fn write_set(dir: &Path, set: &ParamSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, m) in set {
        write_matrix(dir.join(format!("{name}.rten")), m)?;
    }
    Ok(())
}

fn read_set(dir: &Path, names: &[String]) -> Result<ParamSet> {
    names
        .iter()
        .map(|n| {
            Ok((
                n.clone(),
                read_matrix::<f64>(dir.join(format!("{n}.rten")))?,
            ))
        })
        .collect()
}

/// Writes `checkpoint.json` and `params/`, `adam_m/`, `adam_v/` under `dir`.
pub fn save_state(dir: &Path, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let index = CheckpointIndex {
        model: state.model.config.clone(),
        adam: state.adam.config,
        step: state.adam.step,
        params: state.model.params.keys().cloned().collect(),
        moments: state.adam.m.keys().cloned().collect(),
    };
    write_set(&dir.join("params"), &state.model.params)?;
    write_set(&dir.join("adam_m"), &state.adam.m)?;
    write_set(&dir.join("adam_v"), &state.adam.v)?;
    fs::write(
        dir.join(CHECKPOINT_FILE),
        serde_json::to_string_pretty(&index)?,
    )?;
    Ok(())
}

pub fn load_state(dir: &Path) -> Result<TrainState> {
    let path = dir.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(Error::Missing(path.display().to_string()));
    }
    let index: CheckpointIndex = serde_json::from_str(&fs::read_to_string(&path)?)?;
    index.model.validate()?;
    let model = ToyModel {
        config: index.model,
        params: read_set(&dir.join("params"), &index.params)?,
    };
    let adam = Adam {
        config: index.adam,
        step: index.step,
        m: read_set(&dir.join("adam_m"), &index.moments)?,
        v: read_set(&dir.join("adam_v"), &index.moments)?,
    };
    Ok(TrainState { model, adam })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterEntry {
    pub layer: usize,
    pub head: usize,
    pub k_percent: f64,
    pub tau: f64,
    pub rho: Vec<f64>,
    pub proj_q: String,
    pub proj_k: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Writes `routers.json` and the projection tensors under `dir/routers/`.
/// Loss curves are not part of this file.
pub fn save_routers(dir: &Path, results: &[Stage1Result]) -> Result<()> {
    let sub = dir.join("routers");
    fs::create_dir_all(&sub)?;
    let mut entries = Vec::with_capacity(results.len());
    for r in results {
        let stem = format!("layer{}_head{}_k{}", r.layer, r.head, r.k_percent);
        let proj_q = format!("routers/{stem}.proj_q.rten");
        let proj_k = format!("routers/{stem}.proj_k.rten");
        write_matrix(dir.join(&proj_q), &r.routing.router.proj_q)?;
        write_matrix(dir.join(&proj_k), &r.routing.router.proj_k)?;
        entries.push(RouterEntry {
            layer: r.layer,
            head: r.head,
            k_percent: r.k_percent,
            tau: r.routing.router.tau,
            rho: r.routing.rho.clone(),
            proj_q,
            proj_k,
            initial_loss: r.initial_loss,
            final_loss: r.final_loss,
            steps: r.losses.len(),
        });
    }
    fs::write(
        dir.join(ROUTERS_FILE),
        serde_json::to_string_pretty(&entries)?,
    )?;
    Ok(())
}

/// Reads what [`save_routers`] wrote; `losses` come back empty.
pub fn load_routers(dir: &Path) -> Result<Vec<Stage1Result>> {
    let path = dir.join(ROUTERS_FILE);
    if !path.exists() {
        return Err(Error::Missing(path.display().to_string()));
    }
    let entries: Vec<RouterEntry> = serde_json::from_str(&fs::read_to_string(&path)?)?;
    entries
        .into_iter()
        .map(|e| {
            let proj_q: Mat = read_matrix(dir.join(&e.proj_q))?;
            let proj_k: Mat = read_matrix(dir.join(&e.proj_k))?;
            Ok(Stage1Result {
                layer: e.layer,
                head: e.head,
                k_percent: e.k_percent,
                routing: HeadRouting {
                    router: RouterParams::new(proj_q, proj_k, e.tau)?,
                    rho: e.rho,
                },
                losses: Vec::new(),
                initial_loss: e.initial_loss,
                final_loss: e.final_loss,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::diffusion::{synthetic_sequences, SignalSpec};
    use crate::train::model::AttentionMode;
    use crate::train::trainer::{TrainSettings, Trainer};

    fn small() -> ModelConfig {
        ModelConfig {
            seq_len: 32,
            d_model: 16,
            heads: 2,
            layers: 1,
            bq: 8,
            bk: 4,
            diffusion_steps: 1000,
        }
    }

    #[test]
    fn resumed_checkpoint_reproduces_the_next_loss() {
        let data = synthetic_sequences(&SignalSpec::default(), 4, 32, 16, 2).unwrap();
        let settings = TrainSettings {
            steps: 3,
            batch: 2,
            lr: 1e-3,
            seed: 5,
        };
        let model = ToyModel::init(small(), 1).unwrap();
        let mut a = Trainer::new(model, AttentionMode::Full, &data, &settings).unwrap();
        a.run(2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_state(dir.path(), &a.state).unwrap();
        let loaded = load_state(dir.path()).unwrap();
        assert_eq!(loaded, a.state);
        let next = a.step().unwrap();
        let mut b = Trainer::resume(loaded, AttentionMode::Full, &data, &settings).unwrap();
        assert_eq!(b.step().unwrap().to_bits(), next.to_bits());
    }

    #[test]
    fn routers_round_trip() {
        let r = Stage1Result {
            layer: 1,
            head: 0,
            k_percent: 5.0,
            routing: HeadRouting {
                router: RouterParams::new(Mat::identity(4).scale(0.3), Mat::filled(4, 4, 0.1), 0.1)
                    .unwrap(),
                rho: vec![0.25, -1.5],
            },
            losses: vec![1.0, 0.5],
            initial_loss: 1.0,
            final_loss: 0.4,
        };
        let dir = tempfile::tempdir().unwrap();
        save_routers(dir.path(), std::slice::from_ref(&r)).unwrap();
        let back = load_routers(dir.path()).unwrap();
        assert_eq!(back[0].routing, r.routing);
        assert_eq!(back[0].final_loss, r.final_loss);
    }
}
