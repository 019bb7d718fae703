//! Diffusion fine-tuning with α-mixed attention: hard Top-k from the frozen
//! stage-1 routers, trainable mixing logits, optional quantized forward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::quant::QuantConfig;

use super::model::{AttentionMode, ToyModel};
use super::stage1::Stage1Result;
use super::trainer::{TrainSettings, TrainState, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    /// Target block sparsity in percent; the stage-1 pair trained at
    /// `100 − sparsity` percent is used.
    pub sparsity: f64,
    pub steps: usize,
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub seed: u64,
    /// Quantize the sparse branch in the forward during training.
    #[serde(default)]
    pub qat: bool,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_tau() -> f64 {
    0.1
}

impl Stage2Config {
    pub fn k_percent(&self) -> f64 {
        100.0 - self.sparsity
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity >= 0.0 && self.sparsity < 100.0) {
            return Err(Error::Config(format!(
                "sparsity {} outside [0, 100)",
                self.sparsity
            )));
        }
        self.settings().validate()
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
        }
    }

    /// Attention mode used for training.
    pub fn mode(&self) -> AttentionMode {
        sparse_mode(self.k_percent(), self.tau, self.qat)
    }
}

pub fn sparse_mode(k_percent: f64, tau: f64, quantized: bool) -> AttentionMode {
    AttentionMode::Sparse {
        k_percent,
        tau,
        quant: quantized.then(QuantConfig::int8),
    }
}

/// Copies `base` and installs the stage-1 pairs trained at `k_percent`.
pub fn prepare_model(base: &ToyModel, stage1: &[Stage1Result], k_percent: f64) -> Result<ToyModel> {
    let cfg = &base.config;
    let mut heads = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut row = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let r = stage1
                .iter()
                .find(|r| r.layer == l && r.head == h && (r.k_percent - k_percent).abs() < 1e-9)
                .ok_or_else(|| {
                    Error::Missing(format!(
                        "stage-1 router for layer {l} head {h} at k={k_percent}%"
                    ))
                })?;
            row.push((r.routing.router.clone(), r.routing.rho.clone()));
        }
        heads.push(row);
    }
    let mut model = base.clone();
    model.install_routing(&heads)?;
    Ok(model)
}

/// Runs `cfg.steps` optimizer steps. Returns the final state and the
/// per-step minibatch losses.
pub fn stage2_train(
    model: ToyModel,
    data: &[Mat],
    cfg: &Stage2Config,
) -> Result<(TrainState, Vec<f64>)> {
    cfg.validate()?;
    if !model.has_routing() {
        return Err(Error::Missing(
            "model has no stage-1 routing installed".into(),
        ));
    }
    let mut trainer = Trainer::new(model, cfg.mode(), data, &cfg.settings())?;
    let losses = trainer.run(cfg.steps)?;
    Ok((trainer.state, losses))
}
