//! Diffusion-loss training loop shared by pretraining, the dense fine-tune
//! baseline, and the sparse fine-tune.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::numerics::Mat;

use super::adam::{Adam, AdamConfig};
use super::diffusion::{gaussian, NoiseSchedule};
use super::model::{is_router_param, AttentionMode, ParamSet, ToyModel};
use super::step_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        AdamConfig::with_lr(self.lr).validate()
    }
}

/// One noised training example.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub x_t: Mat,
    pub eps: Mat,
    pub t: usize,
}

/// Mean squared error between predicted and true noise.
pub fn noise_prediction_loss(pred: &Mat, eps: &Mat) -> Result<f64> {
    let diff = pred.sub(eps)?;
    Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.data().len() as f64)
}

/// ε-prediction loss of `model` on `x0s` noised to timestep `t` with noise
/// drawn from `noise_seed`, averaged over the batch.
pub fn diffusion_loss(
    model: &ToyModel,
    mode: &AttentionMode,
    x0s: &[Mat],
    t: usize,
    noise_seed: u64,
) -> Result<f64> {
    let schedule = NoiseSchedule::cosine(model.config.diffusion_steps)?;
    let mut rng = step_rng(noise_seed, 0);
    let mut total = 0.0;
    for x0 in x0s {
        let eps = gaussian(x0.rows(), x0.cols(), &mut rng);
        let pred = model.predict(&schedule.noisy(x0, &eps, t)?, t, mode)?;
        total += noise_prediction_loss(&pred, &eps)?;
    }
    Ok(total / x0s.len().max(1) as f64)
}

/// Fixed noised examples for comparing models.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    pub samples: Vec<NoisedSample>,
}

impl ValidationSet {
    /// Every clean sequence at each of `timesteps`, with noise fixed by `seed`.
    pub fn build(
        schedule: &NoiseSchedule,
        x0s: &[Mat],
        timesteps: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(x0s.len() * timesteps.len());
        for (i, x0) in x0s.iter().enumerate() {
            let mut rng = step_rng(seed, i as u64);
            for &t in timesteps {
                if t > schedule.steps() {
                    return Err(Error::Config(format!("timestep {t} beyond schedule")));
                }
                let eps = gaussian(x0.rows(), x0.cols(), &mut rng);
                samples.push(NoisedSample {
                    x_t: schedule.noisy(x0, &eps, t)?,
                    eps,
                    t,
                });
            }
        }
        Ok(Self { samples })
    }

    pub fn loss(&self, model: &ToyModel, mode: &AttentionMode) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.samples {
            total += noise_prediction_loss(&model.predict(&s.x_t, s.t, mode)?, &s.eps)?;
        }
        Ok(total / self.samples.len().max(1) as f64)
    }
}

/// Mean loss over `samples` and its gradient for every parameter the loss
/// touches, router projections excluded.
pub fn loss_and_grads(
    model: &ToyModel,
    mode: &AttentionMode,
    samples: &[NoisedSample],
) -> Result<(f64, ParamSet)> {
    let mut tape = Tape::new();
    let vars = model.leaves(&mut tape);
    let mut total = None;
    for s in samples {
        let pred = model.forward(&mut tape, &vars, &s.x_t, s.t, mode, None)?;
        let l = tape.mse_to(pred, &s.eps)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    let loss = tape.scale(total, 1.0 / samples.len() as f64)?;
    let grads = tape.backward(loss)?;
    let mut out = ParamSet::new();
    for (name, var) in &vars {
        if is_router_param(name) {
            continue;
        }
        if let Some(g) = grads.get(*var) {
            out.insert(name.clone(), g.clone());
        }
    }
    Ok((tape.scalar(loss), out))
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ToyModel,
    pub adam: Adam,
}

pub struct Trainer<'a> {
    pub state: TrainState,
    pub mode: AttentionMode,
    schedule: NoiseSchedule,
    data: &'a [Mat],
    batch: usize,
    seed: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: ToyModel,
        mode: AttentionMode,
        data: &'a [Mat],
        settings: &TrainSettings,
    ) -> Result<Self> {
        settings.validate()?;
        let state = TrainState {
            model,
            adam: Adam::new(AdamConfig::with_lr(settings.lr)),
        };
        Self::resume(state, mode, data, settings)
    }

    /// Continues from a saved state; the next step index is `adam.step`.
    pub fn resume(
        state: TrainState,
        mode: AttentionMode,
        data: &'a [Mat],
        settings: &TrainSettings,
    ) -> Result<Self> {
        settings.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training data is empty".into()));
        }
        let schedule = NoiseSchedule::cosine(state.model.config.diffusion_steps)?;
        Ok(Self {
            state,
            mode,
            schedule,
            data,
            batch: settings.batch,
            seed: settings.seed,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.state.adam.step
    }

    /// The minibatch of step `step`: a pure function of the seed and step.
    pub fn minibatch(&self, step: u64) -> Result<Vec<NoisedSample>> {
        let mut rng = step_rng(self.seed, step);
        let cfg = &self.state.model.config;
        (0..self.batch)
            .map(|_| {
                let idx = rng.random_range(0..self.data.len());
                let t = rng.random_range(1..=self.schedule.steps());
                let eps = gaussian(cfg.seq_len, cfg.d_model, &mut rng);
                Ok(NoisedSample {
                    x_t: self.schedule.noisy(&self.data[idx], &eps, t)?,
                    eps,
                    t,
                })
            })
            .collect()
    }

    /// One optimizer step; returns the minibatch loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.step_index();
        let batch = self.minibatch(step)?;
        let (loss, grads) = match loss_and_grads(&self.state.model, &self.mode, &batch) {
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    step: step as usize,
                    loss: f64::NAN,
                })
            }
            other => other?,
        };
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                loss,
            });
        }
        self.state
            .adam
            .update(&mut self.state.model.params, &grads)?;
        Ok(loss)
    }

    pub fn run(&mut self, steps: usize) -> Result<Vec<f64>> {
        (0..steps).map(|_| self.step()).collect()
    }
}
