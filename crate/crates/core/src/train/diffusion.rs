//! DDPM noise-prediction objective on synthetic smooth sequences.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

/// Offset of the cosine schedule.
const COSINE_OFFSET: f64 = 0.008;

/// Cumulative signal fractions `ᾱ_t` of the cosine schedule, `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config(
                "diffusion needs at least one timestep".into(),
            ));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * PI / 2.0).cos().powi(2)
        };
        let f0 = f(0);
        Ok(Self {
            alpha_bar: (0..=steps).map(|t| (f(t) / f0).clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
    pub fn noisy(&self, x0: &Mat, eps: &Mat, t: usize) -> Result<Mat> {
        let a = self.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        x0.zip_map(eps, |x, e| sa * x + sn * e)
    }
}

/// Shape of the synthetic signal mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    /// Sinusoids summed per sequence.
    pub components: usize,
    /// Largest whole number of periods over the sequence.
    pub max_frequency: usize,
}

impl Default for SignalSpec {
    fn default() -> Self {
        Self {
            components: 3,
            max_frequency: 4,
        }
    }
}

/// `count` sequences of shape `len × features`, each a sum of sinusoids in
/// position with random feature loadings, scaled to unit variance.
pub fn synthetic_sequences(
    spec: &SignalSpec,
    count: usize,
    len: usize,
    features: usize,
    seed: u64,
) -> Result<Vec<Mat>> {
    if spec.components == 0 || spec.max_frequency == 0 {
        return Err(Error::Config(
            "signal needs components and a frequency".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp_scale = (2.0 / spec.components as f64).sqrt();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let comps: Vec<(f64, f64, f64, Vec<f64>)> = (0..spec.components)
            .map(|_| {
                let amp: f64 = StandardNormal.sample(&mut rng);
                let freq = rng.random_range(1..=spec.max_frequency) as f64;
                let phase = rng.random_range(0.0..2.0 * PI);
                let load: Vec<f64> = (0..features)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                (amp * amp_scale, freq, phase, load)
            })
            .collect();
        out.push(Mat::from_fn(len, features, |n, f| {
            comps
                .iter()
                .map(|(a, fr, ph, load)| {
                    a * (2.0 * PI * fr * n as f64 / len as f64 + ph).sin() * load[f]
                })
                .sum()
        }));
    }
    Ok(out)
}

/// Unit Gaussian matrix.
pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Sinusoidal embedding of a scalar position or timestep, as a 1×dim row.
pub fn sinusoidal_row(pos: f64, dim: usize) -> Mat {
    let half = dim / 2;
    Mat::from_fn(1, dim, |_, c| {
        let i = (c % half.max(1)) as f64;
        let freq = 1.0 / 10000f64.powf(i / half.max(1) as f64);
        if c < half {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Fixed sinusoidal position table, `len × dim`.
pub fn position_table(len: usize, dim: usize) -> Mat {
    let mut out = Mat::zeros(len, dim);
    for n in 0..len {
        out.row_mut(n)
            .copy_from_slice(sinusoidal_row(n as f64, dim).row(0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(1000) < 1e-6);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) <= s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn noisy_at_zero_is_clean() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let x = Mat::filled(2, 2, 3.0);
        assert_eq!(s.noisy(&x, &Mat::filled(2, 2, 1.0), 0).unwrap(), x);
    }

    #[test]
    fn sequences_have_roughly_unit_variance() {
        let xs = synthetic_sequences(&SignalSpec::default(), 200, 64, 8, 3).unwrap();
        let n = (200 * 64 * 8) as f64;
        let mean: f64 = xs.iter().map(|m| m.sum()).sum::<f64>() / n;
        let var: f64 = xs
            .iter()
            .flat_map(|m| m.data().iter())
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        assert!((var - 1.0).abs() < 0.25, "{var}");
    }

    #[test]
    fn sequences_are_deterministic() {
        let a = synthetic_sequences(&SignalSpec::default(), 3, 16, 4, 9).unwrap();
        let b = synthetic_sequences(&SignalSpec::default(), 3, 16, 4, 9).unwrap();
        assert_eq!(a, b);
    }
}
