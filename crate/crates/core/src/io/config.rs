//! JSON run configuration. Unknown keys are rejected; every section has
//! defaults sized for a desktop run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::quant::QuantConfig;
use crate::train::diffusion::SignalSpec;
use crate::train::model::ModelConfig;
use crate::train::stage1::Stage1Config;
use crate::train::stage2::Stage2Config;
use crate::verify::VerifyConfig;

use super::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Clean training sequences.
    pub train_sequences: usize,
    /// Clean held-out sequences for validation losses.
    pub val_sequences: usize,
    pub signal: SignalSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_sequences: 64,
            val_sequences: 8,
            signal: SignalSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 4,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QkvConfig {
    pub timesteps: Vec<usize>,
    /// Leading training sequences pushed through the model.
    pub sequences: usize,
}

impl Default for QkvConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![100, 300, 500, 700, 900],
            sequences: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Section {
    pub k_percents: Vec<f64>,
    pub tau: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Self {
            k_percents: vec![3.0, 5.0, 10.0, 15.0],
            tau: 0.1,
            // at lr 1e-3 the mixing logits need on the order of 1000 Adam
            // steps to leave 0; batch 1 keeps that affordable
            steps: 1000,
            batch: 1,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Section {
    /// Percent of block pairs skipped.
    pub sparsity: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Timesteps of the fixed validation set.
    pub val_timesteps: Vec<usize>,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            sparsity: 95.0,
            steps: 100,
            batch: 4,
            lr: 1e-4,
            val_timesteps: vec![50, 200, 400, 600, 800, 950],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Output of `gen-data`; defaults to the run directory the current
    /// config would produce.
    pub data: Option<PathBuf>,
    /// Output of `stage1`; same default rule.
    pub stage1: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub qkv: QkvConfig,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    /// Quantize the sparse branch during stage-2 training.
    pub qat: bool,
    pub quant: QuantConfig,
    pub verify: VerifyConfig,
    pub bench: BenchConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            qkv: QkvConfig::default(),
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
            qat: false,
            quant: QuantConfig::int8(),
            verify: VerifyConfig::default(),
            bench: BenchConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Seeds of the independent random streams, derived from the run seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init = 1,
    TrainData,
    ValData,
    Pretrain,
    Qkv,
    Stage1,
    Stage2,
    Validation,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seed_for(&self, stream: Stream) -> u64 {
        self.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(stream as u64)
    }

    pub fn stage1_config(&self) -> Stage1Config {
        let s = &self.stage1;
        Stage1Config {
            k_percents: s.k_percents.clone(),
            tau: s.tau,
            steps: s.steps,
            batch: s.batch,
            lr: s.lr,
            seed: self.seed_for(Stream::Stage1),
            train_projections: true,
        }
    }

    pub fn stage2_config(&self) -> Stage2Config {
        let s = &self.stage2;
        Stage2Config {
            sparsity: s.sparsity,
            steps: s.steps,
            batch: s.batch,
            lr: s.lr,
            seed: self.seed_for(Stream::Stage2),
            qat: self.qat,
            tau: self.stage1.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.quant.validate()?;
        self.bench.validate()?;
        self.stage1_config().validate()?;
        self.stage2_config().validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.data.train_sequences == 0 || self.data.val_sequences == 0 {
            return bad("data needs training and validation sequences");
        }
        if self.qkv.sequences == 0 || self.qkv.sequences > self.data.train_sequences {
            return bad("qkv.sequences must be in 1..=data.train_sequences");
        }
        let t_max = self.model.diffusion_steps;
        let in_range = |ts: &[usize]| !ts.is_empty() && ts.iter().all(|&t| t >= 1 && t <= t_max);
        if !in_range(&self.qkv.timesteps) || !in_range(&self.stage2.val_timesteps) {
            return bad("timesteps must be non-empty and within 1..=model.diffusion_steps");
        }
        if self.pretrain.batch == 0 {
            return bad("pretrain.batch must be positive");
        }
        Ok(())
    }

    /// Hash of the sections `gen-data` reads.
    pub fn data_hash(&self) -> Result<String> {
        hash_json(&(
            "gen-data",
            self.seed,
            &self.model,
            &self.data,
            &self.pretrain,
            &self.qkv,
        ))
    }

    /// Hash of everything `stage1` depends on.
    pub fn stage1_hash(&self) -> Result<String> {
        hash_json(&("stage1", self.data_hash()?, &self.stage1))
    }

    pub fn stage2_hash(&self) -> Result<String> {
        hash_json(&(
            "stage2",
            self.stage1_hash()?,
            &self.stage2,
            self.qat,
            &self.quant,
        ))
    }

    pub fn verify_hash(&self) -> Result<String> {
        hash_json(&("verify", self.seed, &self.verify))
    }

    pub fn bench_hash(&self) -> Result<String> {
        hash_json(&("bench", self.seed, &self.bench))
    }
}

fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(value)?.as_bytes()))
}
