//! Self-check suites: blockwise vs dense reference, exact decomposition
//! identities, normalization, gradients against central differences,
//! sigmoid Top-k, quantization and tensor round trips.
//!
//! Each suite returns named measurements with their tolerances; nothing here
//! reads the clock, so reports are reproducible bit for bit.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{
    decompose, full_attention, sla2_backward, sla2_forward_blockwise, sla2_forward_naive,
    sla2_naive_parts, AttentionInputs, BackwardOptions, Fault, ForwardOptions, MixRatio,
};
use crate::autodiff::{finite_diff_check, finite_diff_errors, hard_routing};
use crate::error::Result;
use crate::numerics::{matmul, row_softmax, rowsum, Mat, Matrix};
use crate::quant::{dequantize, quantize, smooth_k, QuantConfig};
use crate::router::{
    block_scores_cached, hard_topk, keep_count, soft_topk, soft_values, BlockMask, RouterOutput,
    RouterParams,
};
use crate::rten::Tensor;
use crate::train::stage1::{stage1_loss_and_grads, AttentionSample, HeadRouting};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random instances per budget in the blockwise-vs-reference suite.
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default = "default_budgets")]
    pub k_percents: Vec<f64>,
    #[serde(default = "default_rows")]
    pub soft_rows: usize,
    #[serde(default = "default_eps")]
    pub fd_eps: f64,
    #[serde(default)]
    pub fault: Option<Fault>,
}

fn default_seeds() -> u64 {
    20
}

fn default_budgets() -> Vec<f64> {
    vec![3.0, 5.0, 10.0, 25.0]
}

fn default_rows() -> usize {
    1000
}

fn default_eps() -> f64 {
    1e-5
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            k_percents: default_budgets(),
            soft_rows: default_rows(),
            fd_eps: default_eps(),
            fault: None,
        }
    }
}

/// One measured quantity and the bound it must stay within.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `value <= tolerance`.
    pub fn at_most(suite: &str, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            suite: suite.to_string(),
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }

    /// Passes when `value >= bound`.
    pub fn at_least(suite: &str, name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            suite: suite.to_string(),
            name: name.into(),
            value,
            tolerance: bound,
            passed: value >= bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub fault: Option<Fault>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {:<14} {:<44} {:>12.4e}  (bound {:.1e})",
                if c.passed { "PASS" } else { "FAIL" },
                c.suite,
                c.name,
                c.value,
                c.tolerance
            );
        }
        let failed = self.failures().count();
        let _ = writeln!(out, "{} checks, {} failed", self.checks.len(), failed);
        out
    }
}

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_inputs(
    n: usize,
    d: usize,
    bq: usize,
    bk: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AttentionInputs> {
    AttentionInputs::new(
        normal(n, d, rng),
        normal(n, d, rng),
        normal(n, d, rng),
        bq,
        bk,
    )
}

fn random_mix(tm: usize, rng: &mut ChaCha8Rng) -> Result<MixRatio> {
    MixRatio::from_rho(normal(tm, 1, rng).into_data())
}

fn max_abs_diff<T: crate::numerics::Real>(a: &Matrix<T>, b: &Matrix<T>) -> f64 {
    a.max_abs_diff(b).f64()
}

fn scale_rows(m: &Mat, s: &[f64]) -> Mat {
    Mat::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) * s[r])
}

/// Blockwise streaming forward against the dense reference in double and
/// single precision, over random instances at every budget, with router
/// routing on smoothed keys.
pub fn suite_oracle(cfg: &VerifyConfig, seed: u64) -> Result<Vec<Check>> {
    const SUITE: &str = "oracle";
    let (n, d, bq, bk) = (256, 32, 16, 8);
    let opts = ForwardOptions::default();
    let mut checks = Vec::new();
    for &k in &cfg.k_percents {
        let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
        for s in 0..cfg.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ s.wrapping_mul(0x9e37_79b9));
            let x = random_inputs(n, d, bq, bk, &mut rng)?;
            let alpha = random_mix(x.tm(), &mut rng)?;
            let routing = hard_routing(&x, &RouterParams::identity(d, 0.1), k)?;
            let (blockwise, _) = sla2_forward_blockwise(&x, &routing, &alpha, &opts)?;
            let naive = sla2_forward_naive(&x, &routing, &alpha, &opts)?;
            worst64 = worst64.max(max_abs_diff(&blockwise, &naive));
            let x32 = x.cast::<f32>();
            let (blockwise, _) = sla2_forward_blockwise(&x32, &routing, &alpha, &opts)?;
            let naive = sla2_forward_naive(&x32, &routing, &alpha, &opts)?;
            worst32 = worst32.max(max_abs_diff(&blockwise, &naive));
        }
        checks.push(Check::at_most(
            SUITE,
            format!("k={k}% f64 max |blockwise - naive|"),
            worst64,
            1e-10,
        ));
        checks.push(Check::at_most(
            SUITE,
            format!("k={k}% f32 max |blockwise - naive|"),
            worst32,
            1e-4,
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let x = random_inputs(n, d, bq, bk, &mut rng)?;
    let alpha = random_mix(x.tm(), &mut rng)?;
    let pc = block_scores_cached(
        &x.q,
        &smooth_k(&x.k).0,
        &RouterParams::identity(d, 0.1),
        bq,
        bk,
    )?
    .pc;
    let soft = RouterOutput::Soft(soft_topk(&pc, 10.0, 0.1)?);
    let (blockwise, _) = sla2_forward_blockwise(&x, &soft, &alpha, &opts)?;
    let naive = sla2_forward_naive(&x, &soft, &alpha, &opts)?;
    checks.push(Check::at_most(
        SUITE,
        "soft routing f64 max |blockwise - naive|",
        max_abs_diff(&blockwise, &naive),
        1e-10,
    ));
    Ok(checks)
}

/// All-ones routing leaves the linear branch empty, so the output is the
/// sparse branch exactly and equals dense attention.
pub fn suite_degeneration(seed: u64) -> Result<Vec<Check>> {
    const SUITE: &str = "degeneration";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_inputs(64, 16, 8, 8, &mut rng)?;
    let mask = RouterOutput::Hard(BlockMask::all_ones(x.tm(), x.tn()));
    let alpha = MixRatio::constant(x.tm(), 40.0);
    let (out, saved) = sla2_forward_blockwise(&x, &mask, &alpha, &ForwardOptions::default())?;
    let full = full_attention(&x.q, &x.k, &x.v)?;
    // a low mixing logit must not matter either: the empty branch forces α = 1
    let (out_low, _) = sla2_forward_blockwise(
        &x,
        &mask,
        &MixRatio::zeros(x.tm()),
        &ForwardOptions::default(),
    )?;
    Ok(vec![
        Check::at_most(
            SUITE,
            "all-ones mask vs dense attention",
            max_abs_diff(&out, &full),
            1e-6,
        ),
        Check::at_most(
            SUITE,
            "empty complement output vs O_s (exact)",
            max_abs_diff(&out, &saved.o_s),
            0.0,
        ),
        Check::at_most(
            SUITE,
            "empty complement ignores the mixing logit",
            max_abs_diff(&out_low, &saved.o_s),
            0.0,
        ),
    ])
}

/// `P = P₁ + P₂`, `P₁V = α*⊙O_s` and `O_f − O_s = P₂V + (α* − 1)⊙O_s`, with
/// `O_s` taken from the dense reference of the mixed operator.
pub fn suite_decomposition(seed: u64) -> Result<Vec<Check>> {
    const SUITE: &str = "decomposition";
    let (mut split, mut mass, mut residual) = (0.0f64, 0.0f64, 0.0f64);
    for s in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100 + s));
        let x = random_inputs(64, 16, 8, 4, &mut rng)?;
        let pc = row_softmax(&uniform(x.tm(), x.tn(), &mut rng));
        let mask = hard_topk(&pc, 25.0)?;
        let view = decompose(&x, &mask)?;
        let parts = sla2_naive_parts(
            &x,
            &RouterOutput::Hard(mask),
            &MixRatio::zeros(x.tm()),
            &ForwardOptions::default(),
        )?;
        let o_s = &parts.o_s;
        split = split.max(max_abs_diff(&view.p_full, &view.p1.add(&view.p2)?));
        let p1v = matmul(&view.p1, &x.v, false)?;
        mass = mass.max(max_abs_diff(&p1v, &scale_rows(o_s, view.alpha_star.data())));
        let o_f = matmul(&view.p_full, &x.v, false)?;
        let shifted: Vec<f64> = view.alpha_star.data().iter().map(|a| a - 1.0).collect();
        let rhs = matmul(&view.p2, &x.v, false)?.add(&scale_rows(o_s, &shifted))?;
        residual = residual.max(max_abs_diff(&o_f.sub(o_s)?, &rhs));
    }
    Ok(vec![
        Check::at_most(SUITE, "P - (P1 + P2)", split, 1e-10),
        Check::at_most(SUITE, "P1 V - alpha* O_s", mass, 1e-10),
        Check::at_most(
            SUITE,
            "O_f - O_s - (P2 V + (alpha* - 1) O_s)",
            residual,
            1e-10,
        ),
    ])
}

/// Rows of `α P_s + (1 − α) P_l` sum to one on the dense reference.
pub fn suite_normalization(seed: u64) -> Result<Vec<Check>> {
    const SUITE: &str = "normalization";
    let mut worst = 0.0f64;
    for s in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(200 + s));
        let x = random_inputs(64, 16, 8, 4, &mut rng)?;
        let alpha = MixRatio::from_rho(normal(x.tm(), 1, &mut rng).scale(3.0).into_data())?;
        let pc = row_softmax(&uniform(x.tm(), x.tn(), &mut rng));
        let routing = if s % 2 == 0 {
            RouterOutput::Hard(hard_topk(&pc, 25.0)?)
        } else {
            RouterOutput::Soft(soft_topk(&pc, 25.0, 0.1)?)
        };
        let parts = sla2_naive_parts(&x, &routing, &alpha, &ForwardOptions::default())?;
        for r in 0..x.n() {
            let a = parts.alpha_rows[r];
            let total: f64 = parts
                .p_s
                .row(r)
                .iter()
                .zip(parts.p_l.row(r))
                .map(|(ps, pl)| a * ps + (1.0 - a) * pl)
                .sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    Ok(vec![Check::at_most(
        SUITE,
        "max |row sum - 1|",
        worst,
        1e-6,
    )])
}

fn weighted_output(x: &AttentionInputs, r: &RouterOutput, a: &MixRatio, g: &Mat) -> Result<f64> {
    let (o, _) = sla2_forward_blockwise(x, r, a, &ForwardOptions::default())?;
    Ok(o.hadamard(g)?.sum())
}

/// Hand-written backward against central differences of `⟨G, O⟩` at
/// N = 32, d = 8, for hard and soft routing, plus the frozen-offset router
/// gradient of the mixing-ratio training loss and two tape checks.
pub fn suite_gradients(cfg: &VerifyConfig, seed: u64) -> Result<Vec<Check>> {
    const SUITE: &str = "gradients";
    let eps = cfg.fd_eps;
    let mut checks = Vec::new();
    let opts = BackwardOptions { fault: cfg.fault };
    for soft in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(300 + soft as u64));
        let x = random_inputs(32, 8, 8, 4, &mut rng)?;
        let alpha = random_mix(x.tm(), &mut rng)?;
        let pc = row_softmax(&normal(x.tm(), x.tn(), &mut rng).scale(2.0));
        let routing = if soft {
            RouterOutput::Soft(soft_topk(&pc, 25.0, 0.1)?)
        } else {
            RouterOutput::Hard(hard_topk(&pc, 25.0)?)
        };
        let g = normal(32, 8, &mut rng);
        let (_, saved) = sla2_forward_blockwise(&x, &routing, &alpha, &ForwardOptions::default())?;
        let grads = sla2_backward(&x, &saved, &alpha, &g, &opts)?;
        let rho = Mat::new(alpha.len(), 1, alpha.rho.clone())?;
        let d_rho = Mat::new(alpha.len(), 1, grads.d_rho.clone())?;
        let errs = finite_diff_errors(
            &[x.q.clone(), x.k.clone(), x.v.clone(), rho],
            &[grads.dq.clone(), grads.dk.clone(), grads.dv.clone(), d_rho],
            eps,
            |p| {
                let xi =
                    AttentionInputs::new(p[0].clone(), p[1].clone(), p[2].clone(), x.bq, x.bk)?;
                weighted_output(
                    &xi,
                    &routing,
                    &MixRatio::from_rho(p[3].data().to_vec())?,
                    &g,
                )
            },
        )?;
        let label = if soft { "soft" } else { "hard" };
        for (name, e) in ["dQ", "dK", "dV", "dRho"].iter().zip(errs) {
            checks.push(Check::at_most(
                SUITE,
                format!("{label} routing {name} rel err"),
                e,
                1e-5,
            ));
        }
        if let (RouterOutput::Soft(mask), Some(dw)) = (&routing, &grads.d_weights) {
            let errs = finite_diff_errors(std::slice::from_ref(&mask.values), std::slice::from_ref(dw), eps, |p| {
                let mut m = mask.clone();
                m.values = p[0].clone();
                weighted_output(&x, &RouterOutput::Soft(m), &alpha, &g)
            })?;
            checks.push(Check::at_most(
                SUITE,
                "soft routing dWeights rel err",
                errs[0],
                1e-5,
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(310));
    let x = AttentionInputs::new(
        uniform(32, 8, &mut rng).scale(2.0),
        uniform(32, 8, &mut rng).scale(2.0),
        uniform(32, 8, &mut rng),
        4,
        4,
    )?;
    let sample = AttentionSample::new(x)?;
    let routing = HeadRouting {
        router: RouterParams::new(
            Mat::identity(8).add(&uniform(8, 8, &mut rng).scale(0.5))?,
            Mat::identity(8).add(&uniform(8, 8, &mut rng).scale(0.5))?,
            0.1,
        )?,
        rho: uniform(8, 1, &mut rng).into_data(),
    };
    let k_pct = 25.0;
    let (_, g) = stage1_loss_and_grads(&[&sample], &routing, k_pct)?;
    let x = &sample.inputs;
    let k_s = smooth_k(&x.k).0;
    let pc0 = block_scores_cached(&x.q, &k_s, &routing.router, x.bq, x.bk)?.pc;
    let frozen = soft_topk(&pc0, k_pct, 0.1)?;
    let alpha = MixRatio::from_rho(routing.rho.clone())?;
    let errs = finite_diff_errors(
        &[routing.router.proj_q.clone(), routing.router.proj_k.clone()],
        &[g.d_proj_q, g.d_proj_k],
        eps,
        |p| {
            let router = RouterParams::new(p[0].clone(), p[1].clone(), 0.1)?;
            let pc = block_scores_cached(&x.q, &k_s, &router, x.bq, x.bk)?.pc;
            let mut soft = frozen.clone();
            soft.values = soft_values(&pc, &frozen.lambdas, 0.1);
            let (o, _) = sla2_forward_blockwise(
                x,
                &RouterOutput::Soft(soft),
                &alpha,
                &ForwardOptions::default(),
            )?;
            let diff = o.sub(&sample.full)?;
            Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.data().len() as f64)
        },
    )?;
    checks.push(Check::at_most(
        SUITE,
        "router proj_q frozen-offset rel err",
        errs[0],
        1e-6,
    ));
    checks.push(Check::at_most(
        SUITE,
        "router proj_k frozen-offset rel err",
        errs[1],
        1e-6,
    ));

    let quad = uniform(4, 3, &mut rng);
    let e = finite_diff_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        },
        &[quad],
        1e-3,
    )?;
    checks.push(Check::at_most(SUITE, "tape: sum of squares", e, 1e-10));
    let leaves = [
        uniform(16, 4, &mut rng),
        uniform(16, 4, &mut rng),
        uniform(16, 4, &mut rng),
        uniform(1, 4, &mut rng).map(|g| g + 1.0),
        uniform(1, 4, &mut rng),
    ];
    let e = finite_diff_check(
        |t, v| {
            let a = t.full_attention(v[0], v[1], v[2])?;
            let l = t.layer_norm(a, v[3], v[4])?;
            let h = t.gelu(l)?;
            let sq = t.mul(h, h)?;
            t.sum(sq)
        },
        &leaves,
        1e-5,
    )?;
    checks.push(Check::at_most(
        SUITE,
        "tape: attention, layer norm, gelu",
        e,
        1e-6,
    ));
    Ok(checks)
}

/// Row sums of the sigmoid relaxation hit κ, and at a small temperature the
/// relaxation matches hard Top-k on rows whose entries are well separated.
pub fn suite_soft_topk(cfg: &VerifyConfig, seed: u64) -> Result<Vec<Check>> {
    const SUITE: &str = "soft-topk";
    let tn = 32;
    let budgets = [3.0, 5.0, 10.0, 25.0, 50.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(400));
    let mut worst_sum = 0.0f64;
    for (b, &k) in budgets.iter().enumerate() {
        let rows = cfg.soft_rows / budgets.len() + usize::from(b < cfg.soft_rows % budgets.len());
        let pc = row_softmax(&normal(rows, tn, &mut rng).scale(2.0));
        let soft = soft_topk(&pc, k, 0.1)?;
        let kappa = keep_count(k, tn) as f64;
        for r in rowsum(&soft.values).data() {
            worst_sum = worst_sum.max((r - kappa).abs());
        }
    }
    // distinct entries: a shuffled ladder with spacing 1/tn
    let mut worst_hard = 0.0f64;
    for &k in &budgets {
        let rows = 200;
        let mut data = Vec::with_capacity(rows * tn);
        for _ in 0..rows {
            let mut ladder: Vec<f64> = (0..tn).map(|j| j as f64 / tn as f64).collect();
            rand::seq::SliceRandom::shuffle(ladder.as_mut_slice(), &mut rng);
            data.extend(ladder);
        }
        let pc = Mat::new(rows, tn, data)?;
        let soft = soft_topk(&pc, k, 1e-3)?;
        let hard = hard_topk(&pc, k)?.to_matrix();
        worst_hard = worst_hard.max(max_abs_diff(&soft.values, &hard));
    }
    Ok(vec![
        Check::at_most(SUITE, "max |row sum - kappa|", worst_sum, 1e-6),
        Check::at_most(SUITE, "tau=1e-3 max |soft - hard|", worst_hard, 1e-3),
    ])
}

/// Absmax INT8 round trip within half a step; backward unchanged bit for bit
/// by a quantized forward.
pub fn suite_quantization(seed: u64) -> Result<Vec<Check>> {
    const SUITE: &str = "quantization";
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(500));
    let mut worst = 0.0f64;
    for s in 0..200 {
        let magnitude = 10f64.powi(s % 9 - 4);
        let block = normal(16, 8, &mut rng).scale(magnitude);
        let q = quantize(&block);
        let back: Mat = dequantize(&q);
        let ratio = max_abs_diff(&back, &block) / (q.scale / 2.0);
        worst = worst.max(ratio);
    }
    let x = random_inputs(32, 8, 8, 4, &mut rng)?;
    let alpha = random_mix(x.tm(), &mut rng)?;
    let routing = hard_routing(&x, &RouterParams::identity(8, 0.1), 50.0)?;
    let g = normal(32, 8, &mut rng);
    let (out_q, mut saved) = sla2_forward_blockwise(
        &x,
        &routing,
        &alpha,
        &ForwardOptions::quantized(QuantConfig::int8()),
    )?;
    let quantized = sla2_backward(&x, &saved, &alpha, &g, &BackwardOptions::default())?;
    saved.quant = None;
    let plain = sla2_backward(&x, &saved, &alpha, &g, &BackwardOptions::default())?;
    let (out, _) = sla2_forward_blockwise(&x, &routing, &alpha, &ForwardOptions::default())?;
    let bits_differ = [
        (&quantized.dq, &plain.dq),
        (&quantized.dk, &plain.dk),
        (&quantized.dv, &plain.dv),
    ]
    .iter()
    .map(|(a, b)| {
        a.data()
            .iter()
            .zip(b.data())
            .filter(|(x, y)| x.to_bits() != y.to_bits())
            .count()
    })
    .sum::<usize>()
        + quantized
            .d_rho
            .iter()
            .zip(&plain.d_rho)
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
    Ok(vec![
        Check::at_most(SUITE, "max round-trip error / (scale/2)", worst, 1.0),
        Check::at_most(
            SUITE,
            "backward entries differing bitwise",
            bits_differ as f64,
            0.0,
        ),
        Check::at_least(
            SUITE,
            "quantized forward moves the output",
            max_abs_diff(&out_q, &out),
            f64::MIN_POSITIVE,
        ),
    ])
}

/// Tensor file encoding round trip in both precisions.
pub fn suite_round_trip(seed: u64) -> Result<Vec<Check>> {
    const SUITE: &str = "round-trip";
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(600));
    let m = normal(7, 5, &mut rng).map(|x| x * 1e3);
    let back: Mat = Tensor::decode(&Tensor::from_matrix(&m).encode())?.to_matrix()?;
    let m32 = m.cast::<f32>();
    let back32: Matrix<f32> = Tensor::decode(&Tensor::from_matrix(&m32).encode())?.to_matrix()?;
    let stack = vec![m.clone(), m.scale(-1.0)];
    let back_stack =
        Tensor::decode(&Tensor::from_matrices(&stack)?.encode())?.to_matrices::<f64>()?;
    let exact = back == m && back32 == m32 && back_stack == stack;
    Ok(vec![Check::at_most(
        SUITE,
        "RTEN1 encode/decode mismatches",
        f64::from(!exact as u8),
        0.0,
    )])
}

/// Every suite in a fixed order.
pub fn run_all(cfg: &VerifyConfig, seed: u64) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    checks.extend(suite_oracle(cfg, seed)?);
    checks.extend(suite_degeneration(seed)?);
    checks.extend(suite_decomposition(seed)?);
    checks.extend(suite_normalization(seed)?);
    checks.extend(suite_gradients(cfg, seed)?);
    checks.extend(suite_soft_topk(cfg, seed)?);
    checks.extend(suite_quantization(seed)?);
    checks.extend(suite_round_trip(seed)?);
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        seed,
        fault: cfg.fault,
        checks,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes_and_repeats() {
        let cfg = VerifyConfig {
            seeds: 2,
            k_percents: vec![5.0],
            soft_rows: 50,
            ..VerifyConfig::default()
        };
        let a = run_all(&cfg, 7).unwrap();
        assert!(a.passed, "{}", a.render_text());
        assert_eq!(a, run_all(&cfg, 7).unwrap());
    }

    #[test]
    fn dv_fault_fails_the_gradient_suite() {
        let cfg = VerifyConfig {
            fault: Some(Fault::DvAssign),
            ..VerifyConfig::default()
        };
        let checks = suite_gradients(&cfg, 7).unwrap();
        let failed: Vec<&str> = checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        assert!(failed.iter().any(|n| n.contains("dV")), "{failed:?}");
    }
}
