//! Wall-clock comparison of dense attention with the block-streaming sparse +
//! linear forward in single precision.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accounting::{dense_call_flops, flops_sla2, FlopsReport, GeometryConfig};
use crate::attention::{
    full_attention, sla2_forward_blockwise, AttentionInputs, ForwardOptions, MixRatio,
};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::quant::smooth_k;
use crate::router::{block_scores, hard_topk, RouterOutput, RouterParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_block")]
    pub bq: usize,
    #[serde(default = "default_block")]
    pub bk: usize,
    /// Percent of block pairs skipped by the sparse branch.
    #[serde(default = "default_sparsities")]
    pub sparsities: Vec<f64>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_warmups")]
    pub warmups: usize,
}

fn default_n() -> usize {
    4096
}

fn default_d() -> usize {
    64
}

fn default_block() -> usize {
    64
}

fn default_sparsities() -> Vec<f64> {
    vec![85.0, 90.0, 95.0, 97.0]
}

fn default_reps() -> usize {
    7
}

fn default_warmups() -> usize {
    2
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n: default_n(),
            d: default_d(),
            bq: default_block(),
            bk: default_block(),
            sparsities: default_sparsities(),
            reps: default_reps(),
            warmups: default_warmups(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 || self.n == 0 || self.d == 0 {
            return Err(Error::Config("bench needs positive n, d and reps".into()));
        }
        if self.sparsities.iter().any(|s| !(0.0..100.0).contains(s)) {
            return Err(Error::Config(
                "bench sparsities must lie in [0, 100)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub sparsity_percent: f64,
    pub keep_per_row: usize,
    /// Fraction of block pairs actually skipped after rounding the budget.
    pub realized_sparsity: f64,
    pub median_seconds: f64,
    /// `4N²d` divided by the median time.
    pub ops_per_second: f64,
    pub speedup: f64,
    pub flops: FlopsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub threads: usize,
    pub dense_median_seconds: f64,
    pub dense_ops_per_second: f64,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        let _ = writeln!(
            out,
            "N={} d={} bq={} bk={} f32, median of {} after {} warmups, {} threads",
            c.n, c.d, c.bq, c.bk, c.reps, c.warmups, self.threads
        );
        let _ = writeln!(
            out,
            "dense: {:.2} ms, C/t {:.3} GFLOP/s",
            self.dense_median_seconds * 1e3,
            self.dense_ops_per_second / 1e9
        );
        let _ = writeln!(
            out,
            "{:>8}  {:>5}  {:>9}  {:>10}  {:>12}  {:>8}  {:>12}",
            "sparsity", "kappa", "realized", "median ms", "C/t GFLOP/s", "speedup", "model FLOPs"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>7.1}%  {:>5}  {:>8.2}%  {:>10.2}  {:>12.3}  {:>7.2}x  {:>12.4e}",
                r.sparsity_percent,
                r.keep_per_row,
                100.0 * r.realized_sparsity,
                r.median_seconds * 1e3,
                r.ops_per_second / 1e9,
                r.speedup,
                r.flops.total
            );
        }
        out
    }
}

/// Median wall time of `f` over `reps` runs after `warmups` discarded runs.
pub fn median_time<R>(
    warmups: usize,
    reps: usize,
    mut f: impl FnMut() -> Result<R>,
) -> Result<Duration> {
    for _ in 0..warmups {
        std::hint::black_box(f()?);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(f()?);
        times.push(start.elapsed());
    }
    times.sort_unstable();
    Ok(times[times.len() / 2])
}

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f32> {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Times dense attention once and the sparse + linear forward at every
/// configured sparsity. The sparse timing includes routing.
pub fn run_bench(cfg: &BenchConfig, seed: u64) -> Result<BenchReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = AttentionInputs::new(
        normal(cfg.n, cfg.d, &mut rng),
        normal(cfg.n, cfg.d, &mut rng),
        normal(cfg.n, cfg.d, &mut rng),
        cfg.bq,
        cfg.bk,
    )?;
    let c = dense_call_flops(cfg.n as u64, cfg.d as u64);
    let dense =
        median_time(cfg.warmups, cfg.reps, || full_attention(&x.q, &x.k, &x.v))?.as_secs_f64();
    let router = RouterParams::identity(cfg.d, 0.1);
    let alpha = MixRatio::zeros(x.tm());
    let geometry = GeometryConfig {
        n: cfg.n as u64,
        d: cfg.d as u64,
        heads: 1,
        layers: 1,
        steps: 1,
    };
    let mut rows = Vec::with_capacity(cfg.sparsities.len());
    for &s in &cfg.sparsities {
        let k_percent = 100.0 - s;
        let route = || -> Result<RouterOutput> {
            let k = smooth_k(&x.k).0;
            let pc = block_scores(&x.q, &k, &router, x.bq, x.bk)?;
            Ok(RouterOutput::Hard(hard_topk(&pc, k_percent)?))
        };
        let routing = route()?;
        let keep = routing.keep_per_row();
        let t = median_time(cfg.warmups, cfg.reps, || {
            let r = route()?;
            sla2_forward_blockwise(&x, &r, &alpha, &ForwardOptions::default()).map(|(o, _)| o)
        })?
        .as_secs_f64();
        rows.push(BenchRow {
            sparsity_percent: s,
            keep_per_row: keep,
            realized_sparsity: 1.0 - keep as f64 / x.tn() as f64,
            median_seconds: t,
            ops_per_second: c / t,
            speedup: dense / t,
            flops: flops_sla2(&geometry, s / 100.0, cfg.bq as u64, cfg.bk as u64)?,
        });
    }
    Ok(BenchReport {
        config: cfg.clone(),
        threads: rayon::current_num_threads(),
        dense_median_seconds: dense,
        dense_ops_per_second: c / dense,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_reports_every_sparsity() {
        let cfg = BenchConfig {
            n: 256,
            d: 16,
            bq: 16,
            bk: 16,
            sparsities: vec![50.0, 90.0],
            reps: 3,
            warmups: 1,
        };
        let r = run_bench(&cfg, 1).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[1].keep_per_row, 2);
        let g = GeometryConfig {
            n: 256,
            d: 16,
            heads: 1,
            layers: 1,
            steps: 1,
        };
        assert_eq!(r.rows[0].flops, flops_sla2(&g, 0.5, 16, 16).unwrap());
    }
}
