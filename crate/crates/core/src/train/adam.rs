//! Adam with bias correction, applied to a named parameter set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

use super::model::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn adam_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config(format!("bad optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Optimizer state: step count and first/second moments per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Missing(format!("parameter {name}")))?;
            p.expect_same_shape(g)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            for i in 0..g.data().len() {
                let gi = g.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
