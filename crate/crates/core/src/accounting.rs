//! Analytic operation counts for dense attention and the sparse + linear
//! operator, per attention call and scaled by heads, layers and steps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    /// Tokens per attention call.
    pub n: u64,
    /// Head dimension.
    pub d: u64,
    pub heads: u64,
    pub layers: u64,
    /// Denoising iterations.
    pub steps: u64,
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.n, self.d, self.heads, self.layers, self.steps].contains(&0) {
            return Err(Error::Config("geometry fields must be positive".into()));
        }
        Ok(())
    }

    /// Number of attention calls: heads · layers · steps.
    pub fn calls(&self) -> f64 {
        (self.heads * self.layers * self.steps) as f64
    }
}

/// Dense attention cost per call, `4N²d` (QKᵀ plus PV, multiply-add = 2).
pub fn dense_call_flops(n: u64, d: u64) -> f64 {
    4.0 * (n as f64).powi(2) * d as f64
}

pub fn flops_full(g: &GeometryConfig) -> f64 {
    dense_call_flops(g.n, g.d) * g.calls()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub full: f64,
    pub sparse_branch: f64,
    pub linear_branch: f64,
    pub router: f64,
    pub total: f64,
    pub sparsity: f64,
    pub savings: f64,
    pub overhead_fraction: f64,
}

/// Linear branch per call: `KᵀV` accumulation and `φ(Q)H` (2Nd² each), the
/// normalizer `φ(Q)Z` and division (2Nd), and the α-mix of both outputs
/// (3Nd).
pub fn linear_call_flops(n: u64, d: u64) -> f64 {
    let (n, d) = (n as f64, d as f64);
    4.0 * n * d * d + 2.0 * n * d + 3.0 * n * d
}

/// Router per call: pooled score matrix, the two projections of the pooled
/// tokens, and mean pooling of Q and K. Partial blocks count as whole ones.
pub fn router_call_flops(n: u64, d: u64, bq: u64, bk: u64) -> f64 {
    let tm = n.div_ceil(bq) as f64;
    let tn = n.div_ceil(bk) as f64;
    let (nf, d) = (n as f64, d as f64);
    2.0 * tm * tn * d + 2.0 * tm * d * d + 2.0 * tn * d * d + 2.0 * nf * d
}

pub fn flops_sla2(g: &GeometryConfig, sparsity: f64, bq: u64, bk: u64) -> Result<FlopsReport> {
    g.validate()?;
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity {sparsity} outside [0, 1)")));
    }
    if bq == 0 || bk == 0 {
        return Err(Error::Config("block sizes must be positive".into()));
    }
    let calls = g.calls();
    let full = flops_full(g);
    let sparse_branch = (1.0 - sparsity) * full;
    let linear_branch = linear_call_flops(g.n, g.d) * calls;
    let router = router_call_flops(g.n, g.d, bq, bk) * calls;
    let total = sparse_branch + linear_branch + router;
    Ok(FlopsReport {
        full,
        sparse_branch,
        linear_branch,
        router,
        total,
        sparsity,
        savings: 1.0 - total / full,
        overhead_fraction: (linear_branch + router) / full,
    })
}

/// Published dense total for the 1.3B video model and the geometry it is
/// calibrated against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub published_full: f64,
    pub geometry: GeometryConfig,
    pub bq: u64,
    pub bk: u64,
}

pub const CALIBRATION_JSON: &str = include_str!("../golden/wan13b_flops.json");

impl Calibration {
    pub fn load() -> Result<Self> {
        Ok(serde_json::from_str(CALIBRATION_JSON)?)
    }

    /// Calls needed to reach the published total, before rounding.
    pub fn solved_calls(&self) -> f64 {
        self.published_full / dense_call_flops(self.geometry.n, self.geometry.d)
    }
}

fn tera(x: f64) -> String {
    format!("{:.3}T", x / 1e12)
}

/// Plain-text table, one row per report.
pub fn render_table(reports: &[FlopsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8}  {:>10}  {:>10}  {:>10}  {:>10}  {:>10}  {:>9}  {:>9}",
        "sparsity", "full", "sparse", "linear", "router", "total", "total/full", "savings"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:>7.1}%  {:>10}  {:>10}  {:>10}  {:>10}  {:>10}  {:>9.3}%  {:>8.3}%",
            r.sparsity * 100.0,
            tera(r.full),
            tera(r.sparse_branch),
            tera(r.linear_branch),
            tera(r.router),
            tera(r.total),
            100.0 * r.total / r.full,
            100.0 * r.savings,
        );
    }
    if let Some(r) = reports.first() {
        let _ = writeln!(
            out,
            "overhead (linear + router) / full: {:.4}%",
            100.0 * r.overhead_fraction
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: u64) -> GeometryConfig {
        GeometryConfig {
            n,
            d: 1,
            heads: 1,
            layers: 1,
            steps: 1,
        }
    }

    #[test]
    fn full_count_formula() {
        assert_eq!(flops_full(&unit(2)), 16.0);
        assert_eq!(flops_full(&unit(8)), 4.0 * flops_full(&unit(4)));
    }

    #[test]
    fn components_sum_and_dense_limit() {
        let g = GeometryConfig {
            n: 1024,
            d: 64,
            heads: 2,
            layers: 3,
            steps: 5,
        };
        let r = flops_sla2(&g, 0.0, 64, 32).unwrap();
        assert!(r.total >= r.full);
        assert_eq!(r.total, r.sparse_branch + r.linear_branch + r.router);
        assert_eq!(r.savings, 1.0 - r.total / r.full);
    }

    #[test]
    fn overhead_ignores_sparsity_and_savings_increase() {
        let g = unit(4096);
        let mut prev = f64::NEG_INFINITY;
        let base = flops_sla2(&g, 0.1, 64, 64).unwrap().overhead_fraction;
        for s in [0.1, 0.5, 0.9, 0.95, 0.99] {
            let r = flops_sla2(&g, s, 64, 64).unwrap();
            assert_eq!(r.overhead_fraction, base);
            assert!(r.savings > prev);
            prev = r.savings;
        }
    }

    #[test]
    fn calibrated_call_count_is_whole() {
        let c = Calibration::load().unwrap();
        let solved = c.solved_calls();
        assert!((solved - c.geometry.calls()).abs() < 0.01, "{solved}");
        let full = flops_full(&c.geometry);
        assert!((full - c.published_full).abs() / c.published_full < 1e-4);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(flops_sla2(&unit(8), 1.0, 2, 2).is_err());
        assert!(flops_sla2(&unit(8), -0.1, 2, 2).is_err());
        assert!(flops_sla2(&unit(0), 0.5, 2, 2).is_err());
    }
}
