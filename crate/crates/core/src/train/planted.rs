//! Synthetic Q, K, V with planted routing structure.
//!
//! Every query block belongs to a group and shares a direction with that
//! group's *decoy* key blocks, so decoys have the highest mean (pooled) score.
//! A few *hot* key blocks instead carry a wide spread along a "variance"
//! channel that queries also point at: half of their tokens score far above
//! anything else and soak up most of the softmax mass, while their pooled
//! mean only moderately exceeds the neutral blocks. Ranking blocks by pooled
//! score therefore keeps the decoys; a router that re-weights channels can
//! learn to keep the hot blocks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionInputs;
use crate::error::{Error, Result};
use crate::numerics::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    pub n: usize,
    pub d: usize,
    pub bq: usize,
    pub bk: usize,
    pub groups: usize,
    pub decoys_per_group: usize,
    pub hot_blocks: usize,
    /// Query weight on its group direction.
    pub group_strength: f64,
    /// Decoy key weight on the group direction.
    pub decoy_strength: f64,
    /// Query weight on the variance channel.
    pub query_variance_weight: f64,
    /// Spread of hot-block keys along the variance channel.
    pub spread: f64,
    pub noise: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n: 256,
            d: 32,
            bq: 16,
            bk: 8,
            groups: 4,
            decoys_per_group: 2,
            hot_blocks: 2,
            group_strength: 3.0,
            decoy_strength: 3.3,
            query_variance_weight: 4.0,
            spread: 7.0,
            noise: 0.1,
        }
    }
}

impl PlantedSpec {
    fn validate(&self) -> Result<()> {
        let tn = self.n / self.bk.max(1);
        if self.bq == 0 || self.bk == 0 || !self.n.is_multiple_of(self.bq) || !self.n.is_multiple_of(self.bk) {
            return Err(Error::Config(
                "n must be divisible by the block sizes".into(),
            ));
        }
        if self.d < self.groups + 1 {
            return Err(Error::Config("d too small for the planted channels".into()));
        }
        if self.groups * self.decoys_per_group + self.hot_blocks > tn {
            return Err(Error::Config(
                "not enough key blocks for the planted layout".into(),
            ));
        }
        if !self.bk.is_multiple_of(2) {
            return Err(Error::Config("bk must be even".into()));
        }
        Ok(())
    }

    /// Channel carrying the within-block spread.
    pub fn variance_channel(&self) -> usize {
        self.groups
    }
}

/// Which key blocks were planted as hot in one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedInstance {
    pub inputs: AttentionInputs,
    pub hot: Vec<usize>,
    pub decoys: Vec<Vec<usize>>,
}

pub fn planted_instances(
    spec: &PlantedSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<PlantedInstance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let tm = spec.n / spec.bq;
    let tn = spec.n / spec.bk;
    let var_ch = spec.variance_channel();
    (0..count)
        .map(|_| {
            let mut blocks: Vec<usize> = (0..tn).collect();
            blocks.shuffle(&mut rng);
            let hot = {
                let mut h = blocks[..spec.hot_blocks].to_vec();
                h.sort_unstable();
                h
            };
            let decoys: Vec<Vec<usize>> = (0..spec.groups)
                .map(|g| {
                    let start = spec.hot_blocks + g * spec.decoys_per_group;
                    let mut v = blocks[start..start + spec.decoys_per_group].to_vec();
                    v.sort_unstable();
                    v
                })
                .collect();
            let query_group: Vec<usize> =
                (0..tm).map(|_| rng.random_range(0..spec.groups)).collect();
            let q = Mat::from_fn(spec.n, spec.d, |r, c| {
                let g = query_group[r / spec.bq];
                let base = if c == g {
                    spec.group_strength
                } else if c == var_ch {
                    spec.query_variance_weight
                } else {
                    0.0
                };
                base + noise.sample(&mut rng)
            });
            let mut k = Mat::zeros(spec.n, spec.d);
            for j in 0..tn {
                let group = decoys.iter().position(|d| d.contains(&j));
                let is_hot = hot.contains(&j);
                // half the tokens at +spread, half at -spread/2: pooled mean spread/4
                let mut signs: Vec<bool> = (0..spec.bk).map(|t| t < spec.bk / 2).collect();
                signs.shuffle(&mut rng);
                for (t, &up) in signs.iter().enumerate() {
                    let row = k.row_mut(j * spec.bk + t);
                    for (c, slot) in row.iter_mut().enumerate() {
                        let mut val = noise.sample(&mut rng);
                        if Some(c) == group {
                            val += spec.decoy_strength;
                        }
                        if c == var_ch && is_hot {
                            val += if up { spec.spread } else { -spec.spread / 2.0 };
                        }
                        *slot = val;
                    }
                }
            }
            let v = Mat::from_fn(spec.n, spec.d, |_, _| rng.random_range(-1.0..1.0) * 1.7);
            Ok(PlantedInstance {
                inputs: AttentionInputs::new(q, k, v, spec.bq, spec.bk)?,
                hot,
                decoys,
            })
        })
        .collect()
}
