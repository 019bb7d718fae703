//! Router and mixing-ratio training against dense attention outputs.
//!
//! Routing during training is the sigmoid Top-k relaxation; its per-row
//! offsets are treated as constants when differentiating.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    full_attention, sla2_backward, sla2_forward_blockwise, AttentionInputs, BackwardOptions,
    ForwardOptions, MixRatio,
};
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::quant::smooth_k;
use crate::router::{
    block_scores_backward, block_scores_cached, hard_topk, soft_topk, soft_topk_backward,
    RouterOutput, RouterParams,
};

use super::adam::{Adam, AdamConfig};
use super::model::ParamSet;
use super::qkv::QkvDataset;
use super::step_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub k_percents: Vec<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub steps: usize,
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub seed: u64,
    /// When false only the mixing logits train; the projections stay at
    /// identity (the pooled-score heuristic).
    #[serde(default = "yes")]
    pub train_projections: bool,
}

fn default_tau() -> f64 {
    0.1
}

fn default_lr() -> f64 {
    1e-3
}

fn yes() -> bool {
    true
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.k_percents.is_empty() {
            return Err(Error::Config("k_percents must not be empty".into()));
        }
        if let Some(k) = self
            .k_percents
            .iter()
            .find(|k| !(**k > 0.0 && **k <= 100.0))
        {
            return Err(Error::Config(format!("k% {k} outside (0, 100]")));
        }
        if !(self.tau > 0.0) || self.batch == 0 {
            return Err(Error::Config("tau and batch must be positive".into()));
        }
        AdamConfig::with_lr(self.lr).validate()
    }
}

/// One head's inputs and its dense-attention target.
#[derive(Debug, Clone)]
pub struct AttentionSample {
    pub inputs: AttentionInputs,
    pub full: Mat,
}

impl AttentionSample {
    pub fn new(inputs: AttentionInputs) -> Result<Self> {
        let full = full_attention(&inputs.q, &inputs.k, &inputs.v)?;
        Ok(Self { inputs, full })
    }
}

/// Trained router and mixing logits of one head at one budget.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRouting {
    pub router: RouterParams,
    pub rho: Vec<f64>,
}

impl HeadRouting {
    pub fn identity(d: usize, tm: usize, tau: f64) -> Self {
        Self {
            router: RouterParams::identity(d, tau),
            rho: vec![0.0; tm],
        }
    }
}

/// Gradients of the stage-1 loss.
#[derive(Debug, Clone)]
pub struct Stage1Grads {
    pub d_proj_q: Mat,
    pub d_proj_k: Mat,
    pub d_rho: Vec<f64>,
}

fn mse(a: &Mat, b: &Mat) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64
}

fn routed(
    sample: &AttentionSample,
    routing: &HeadRouting,
    k_percent: f64,
    soft: bool,
) -> Result<RouterOutput> {
    let x = &sample.inputs;
    let pc = block_scores_cached(&x.q, &smooth_k(&x.k).0, &routing.router, x.bq, x.bk)?.pc;
    Ok(if soft {
        RouterOutput::Soft(soft_topk(&pc, k_percent, routing.router.tau)?)
    } else {
        RouterOutput::Hard(hard_topk(&pc, k_percent)?)
    })
}

/// Mean squared error to dense attention, averaged over samples, rows and
/// features. `soft` selects the training relaxation, otherwise hard Top-k.
pub fn stage1_loss(
    samples: &[&AttentionSample],
    routing: &HeadRouting,
    k_percent: f64,
    soft: bool,
) -> Result<f64> {
    let alpha = MixRatio::from_rho(routing.rho.clone())?;
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let r = routed(s, routing, k_percent, soft)?;
            let (o, _) = sla2_forward_blockwise(&s.inputs, &r, &alpha, &ForwardOptions::default())?;
            Ok(mse(&o, &s.full))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len().max(1) as f64)
}

/// Soft-routing loss and its gradients w.r.t. both projections and the
/// mixing logits.
pub fn stage1_loss_and_grads(
    samples: &[&AttentionSample],
    routing: &HeadRouting,
    k_percent: f64,
) -> Result<(f64, Stage1Grads)> {
    let alpha = MixRatio::from_rho(routing.rho.clone())?;
    let count = samples.len().max(1) as f64;
    let parts: Vec<(f64, Stage1Grads)> = samples
        .par_iter()
        .map(|s| {
            let x = &s.inputs;
            let cache = block_scores_cached(&x.q, &smooth_k(&x.k).0, &routing.router, x.bq, x.bk)?;
            let soft = soft_topk(&cache.pc, k_percent, routing.router.tau)?;
            let r = RouterOutput::Soft(soft.clone());
            let (o, saved) = sla2_forward_blockwise(x, &r, &alpha, &ForwardOptions::default())?;
            let n = o.data().len() as f64;
            let d_out = o.zip_map(&s.full, |a, b| 2.0 * (a - b) / (n * count))?;
            let g = sla2_backward(x, &saved, &alpha, &d_out, &BackwardOptions::default())?;
            let d_w = g.d_weights.expect("soft routing yields weight gradients");
            let d_pc = soft_topk_backward(&cache.pc, &soft, &d_w)?;
            let rg = block_scores_backward(&cache, &routing.router, &d_pc)?;
            Ok((
                mse(&o, &s.full),
                Stage1Grads {
                    d_proj_q: rg.d_proj_q,
                    d_proj_k: rg.d_proj_k,
                    d_rho: g.d_rho,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let d = routing.router.dim();
    let mut total = Stage1Grads {
        d_proj_q: Mat::zeros(d, d),
        d_proj_k: Mat::zeros(d, d),
        d_rho: vec![0.0; routing.rho.len()],
    };
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        total.d_proj_q.add_assign(&g.d_proj_q)?;
        total.d_proj_k.add_assign(&g.d_proj_k)?;
        for (a, b) in total.d_rho.iter_mut().zip(&g.d_rho) {
            *a += b;
        }
    }
    Ok((loss / count, total))
}

/// Result of training one head at one budget.
#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub layer: usize,
    pub head: usize,
    pub k_percent: f64,
    pub routing: HeadRouting,
    /// Minibatch loss before each step.
    pub losses: Vec<f64>,
    /// Soft-routing loss on all samples before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains one (router, mixing logits) pair from identity / zero.
pub fn train_head(
    samples: &[AttentionSample],
    k_percent: f64,
    cfg: &Stage1Config,
) -> Result<(HeadRouting, Vec<f64>, f64, f64)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("stage-1 dataset is empty".into()));
    }
    let x = &samples[0].inputs;
    let mut routing = HeadRouting::identity(x.d(), x.tm(), cfg.tau);
    let all: Vec<&AttentionSample> = samples.iter().collect();
    let initial = stage1_loss(&all, &routing, k_percent, true)?;
    let mut params = ParamSet::new();
    params.insert("proj_q".into(), routing.router.proj_q.clone());
    params.insert("proj_k".into(), routing.router.proj_k.clone());
    params.insert(
        "rho".into(),
        Mat::new(routing.rho.len(), 1, routing.rho.clone())?,
    );
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&AttentionSample> = if cfg.batch >= samples.len() {
            all.clone()
        } else {
            let mut rng = step_rng(cfg.seed, step as u64);
            let mut idx = sample(&mut rng, samples.len(), cfg.batch).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &samples[i]).collect()
        };
        let (loss, g) = stage1_loss_and_grads(&batch, &routing, k_percent)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        let mut grads = ParamSet::new();
        if cfg.train_projections {
            grads.insert("proj_q".into(), g.d_proj_q);
            grads.insert("proj_k".into(), g.d_proj_k);
        }
        grads.insert("rho".into(), Mat::new(g.d_rho.len(), 1, g.d_rho)?);
        adam.update(&mut params, &grads)?;
        routing = HeadRouting {
            router: RouterParams::new(params["proj_q"].clone(), params["proj_k"].clone(), cfg.tau)?,
            rho: params["rho"].data().to_vec(),
        };
    }
    let final_loss = stage1_loss(&all, &routing, k_percent, true)?;
    Ok((routing, losses, initial, final_loss))
}

/// Trains every (layer, head) of the captured dataset at every budget.
pub fn stage1_train(
    dataset: &QkvDataset,
    bq: usize,
    bk: usize,
    cfg: &Stage1Config,
) -> Result<Vec<Stage1Result>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("stage-1 dataset is empty".into()));
    }
    let mut heads: Vec<(usize, usize)> =
        dataset.records.iter().map(|r| (r.layer, r.head)).collect();
    heads.sort_unstable();
    heads.dedup();
    let mut out = Vec::new();
    for (layer, head) in heads {
        let samples: Vec<AttentionSample> = dataset
            .head(layer, head)
            .into_iter()
            .map(|r| {
                AttentionSample::new(AttentionInputs::new(
                    r.q.clone(),
                    r.k.clone(),
                    r.v.clone(),
                    bq,
                    bk,
                )?)
            })
            .collect::<Result<_>>()?;
        for &k in &cfg.k_percents {
            let (routing, losses, initial_loss, final_loss) = train_head(&samples, k, cfg)?;
            out.push(Stage1Result {
                layer,
                head,
                k_percent: k,
                routing,
                losses,
                initial_loss,
                final_loss,
            });
        }
    }
    Ok(out)
}
