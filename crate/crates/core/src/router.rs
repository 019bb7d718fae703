//! Learnable block router.
//!
//! Queries and keys are mean-pooled per block, projected, and scored; each
//! query block then keeps its `κ` best key blocks. Inference uses a hard
//! Top-k; router training uses a sigmoid relaxation whose per-row offset `λ`
//! is found by bisection so every row still sums to `κ`.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{matmul, mean_pool, row_softmax, sigmoid, Mat, Matrix, Real, Vector};

/// Half-width (in logit units) added to the λ bracket; σ is saturated beyond it.
const BRACKET_MARGIN: f64 = 40.0;
/// Required accuracy of each soft row sum.
pub const SOFT_ROW_TOL: f64 = 1e-6;
const MAX_BISECTION_ITERS: usize = 200;

/// Number of key blocks kept per query block: `max(1, round(k% · tn))`,
/// clamped to `tn`.
pub fn keep_count(k_percent: f64, tn: usize) -> usize {
    let raw = (k_percent / 100.0 * tn as f64).round() as usize;
    raw.max(1).min(tn)
}

fn check_k_percent(k_percent: f64) -> Result<()> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Config(format!(
            "k% must lie in (0, 100], got {k_percent}"
        )));
    }
    Ok(())
}

/// Projections and temperature of the router.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    pub proj_q: Mat,
    pub proj_k: Mat,
    pub tau: f64,
}

impl RouterParams {
    pub fn new(proj_q: Mat, proj_k: Mat, tau: f64) -> Result<Self> {
        let d = proj_q.rows();
        if proj_q.shape() != (d, d) || proj_k.shape() != (d, d) {
            return shape_err(format!(
                "router projections must be square and equal, got {:?} and {:?}",
                proj_q.shape(),
                proj_k.shape()
            ));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        Ok(Self {
            proj_q,
            proj_k,
            tau,
        })
    }

    /// Identity projections: the plain pooled-score heuristic.
    pub fn identity(d: usize, tau: f64) -> Self {
        Self::new(Mat::identity(d), Mat::identity(d), tau).expect("identity router is valid")
    }

    pub fn dim(&self) -> usize {
        self.proj_q.rows()
    }
}

/// Hard routing decision per (query block, key block).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    tm: usize,
    tn: usize,
    bits: Vec<bool>,
    keep_per_row: usize,
}

impl BlockMask {
    /// Builds a mask from explicit bits. Every row must keep the same number
    /// of blocks.
    pub fn from_bits(tm: usize, tn: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != tm * tn {
            return shape_err(format!("{tm}x{tn} mask needs {} bits", tm * tn));
        }
        let keep = bits[..tn.min(bits.len())].iter().filter(|&&b| b).count();
        for i in 0..tm {
            let row = bits[i * tn..(i + 1) * tn].iter().filter(|&&b| b).count();
            if row != keep {
                return Err(Error::Contract(format!(
                    "mask row {i} keeps {row} blocks, row 0 keeps {keep}"
                )));
            }
        }
        Ok(Self {
            tm,
            tn,
            bits,
            keep_per_row: keep,
        })
    }

    pub fn all_ones(tm: usize, tn: usize) -> Self {
        Self::from_bits(tm, tn, vec![true; tm * tn]).unwrap()
    }

    pub fn all_zeros(tm: usize, tn: usize) -> Self {
        Self::from_bits(tm, tn, vec![false; tm * tn]).unwrap()
    }

    pub fn tm(&self) -> usize {
        self.tm
    }

    pub fn tn(&self) -> usize {
        self.tn
    }

    pub fn keep_per_row(&self) -> usize {
        self.keep_per_row
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.tn + j]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn nnz(&self) -> usize {
        self.tm * self.keep_per_row
    }

    /// Fraction of block pairs skipped by the sparse branch.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.keep_per_row as f64 / self.tn as f64
    }

    pub fn kept_in_row(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.tn).filter(move |&j| self.get(i, j))
    }

    pub fn to_matrix(&self) -> Mat {
        Mat::from_fn(
            self.tm,
            self.tn,
            |i, j| if self.get(i, j) { 1.0 } else { 0.0 },
        )
    }
}

/// Relaxed routing weights in (0, 1), with the per-row offsets that produced
/// them.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub values: Mat,
    pub lambdas: Vector,
    pub keep_per_row: usize,
    pub tau: f64,
}

impl SoftMask {
    pub fn tm(&self) -> usize {
        self.values.rows()
    }

    pub fn tn(&self) -> usize {
        self.values.cols()
    }
}

/// What the router hands the attention kernel.
#[derive(Clone, Debug, PartialEq)]
pub enum RouterOutput {
    Hard(BlockMask),
    Soft(SoftMask),
}

impl RouterOutput {
    pub fn tm(&self) -> usize {
        match self {
            RouterOutput::Hard(m) => m.tm(),
            RouterOutput::Soft(s) => s.tm(),
        }
    }

    pub fn tn(&self) -> usize {
        match self {
            RouterOutput::Hard(m) => m.tn(),
            RouterOutput::Soft(s) => s.tn(),
        }
    }

    pub fn keep_per_row(&self) -> usize {
        match self {
            RouterOutput::Hard(m) => m.keep_per_row(),
            RouterOutput::Soft(s) => s.keep_per_row,
        }
    }

    /// Weight of block (i, j) in the sparse branch; the linear branch gets
    /// `1 - weight`.
    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        match self {
            RouterOutput::Hard(m) => {
                if m.get(i, j) {
                    1.0
                } else {
                    0.0
                }
            }
            RouterOutput::Soft(s) => s.values.get(i, j),
        }
    }

    pub fn as_hard(&self) -> Option<&BlockMask> {
        match self {
            RouterOutput::Hard(m) => Some(m),
            RouterOutput::Soft(_) => None,
        }
    }

    pub fn is_soft(&self) -> bool {
        matches!(self, RouterOutput::Soft(_))
    }
}

/// Intermediates of [`block_scores`] needed to differentiate it.
#[derive(Clone, Debug)]
pub struct BlockScores {
    pub pc: Mat,
    q_pooled: Mat,
    k_pooled: Mat,
    q_proj: Mat,
    k_proj: Mat,
    bq: usize,
    bk: usize,
}

/// Gradients of a scalar loss through [`block_scores`].
#[derive(Clone, Debug)]
pub struct RouterGrads {
    pub d_proj_q: Mat,
    pub d_proj_k: Mat,
    /// Gradient w.r.t. the (un-pooled) query rows.
    pub d_q: Mat,
    /// Gradient w.r.t. the (un-pooled, already smoothed) key rows.
    pub d_k: Mat,
}

/// `row_softmax((pool(q)·proj_q)(pool(k)·proj_k)ᵀ / √d)`, one row per query
/// block and one column per key block.
pub fn block_scores<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    params: &RouterParams,
    bq: usize,
    bk: usize,
) -> Result<Matrix<T>> {
    check_qk(q, k, params)?;
    let qp = matmul(&mean_pool(q, bq)?, &params.proj_q.cast(), false)?;
    let kp = matmul(&mean_pool(k, bk)?, &params.proj_k.cast(), false)?;
    let scale = T::one() / T::c((q.cols() as f64).sqrt());
    Ok(row_softmax(&matmul(&qp, &kp, true)?.scale(scale)))
}

fn check_qk<T: Real>(q: &Matrix<T>, k: &Matrix<T>, params: &RouterParams) -> Result<()> {
    if q.shape() != k.shape() {
        return shape_err(format!("q {:?} vs k {:?}", q.shape(), k.shape()));
    }
    if q.cols() != params.dim() {
        return shape_err(format!(
            "head dim {} vs router dim {}",
            q.cols(),
            params.dim()
        ));
    }
    Ok(())
}

/// [`block_scores`] in double precision, keeping what the backward needs.
pub fn block_scores_cached(
    q: &Mat,
    k: &Mat,
    params: &RouterParams,
    bq: usize,
    bk: usize,
) -> Result<BlockScores> {
    check_qk(q, k, params)?;
    let q_pooled = mean_pool(q, bq)?;
    let k_pooled = mean_pool(k, bk)?;
    let q_proj = matmul(&q_pooled, &params.proj_q, false)?;
    let k_proj = matmul(&k_pooled, &params.proj_k, false)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let pc = row_softmax(&matmul(&q_proj, &k_proj, true)?.scale(scale));
    Ok(BlockScores {
        pc,
        q_pooled,
        k_pooled,
        q_proj,
        k_proj,
        bq,
        bk,
    })
}

/// Backpropagates `d_pc` through the softmax, the bilinear score and both
/// projections and poolings.
pub fn block_scores_backward(
    cache: &BlockScores,
    params: &RouterParams,
    d_pc: &Mat,
) -> Result<RouterGrads> {
    cache.pc.expect_same_shape(d_pc)?;
    let d = params.dim();
    let scale = 1.0 / (d as f64).sqrt();
    // softmax: dz = p ⊙ (dp − ⟨dp, p⟩)
    let mut d_logits = Mat::zeros(cache.pc.rows(), cache.pc.cols());
    for r in 0..cache.pc.rows() {
        let p = cache.pc.row(r);
        let g = d_pc.row(r);
        let inner = crate::numerics::dot(p, g);
        for (c, out) in d_logits.row_mut(r).iter_mut().enumerate() {
            *out = p[c] * (g[c] - inner) * scale;
        }
    }
    let d_qp = matmul(&d_logits, &cache.k_proj, false)?;
    let d_kp = matmul(&d_logits.transpose(), &cache.q_proj, false)?;
    let d_proj_q = matmul(&cache.q_pooled.transpose(), &d_qp, false)?;
    let d_proj_k = matmul(&cache.k_pooled.transpose(), &d_kp, false)?;
    let d_qbar = matmul(&d_qp, &params.proj_q, true)?;
    let d_kbar = matmul(&d_kp, &params.proj_k, true)?;
    let unpool = |g: &Mat, block: usize| {
        let inv = 1.0 / block as f64;
        Mat::from_fn(g.rows() * block, g.cols(), |r, c| g.get(r / block, c) * inv)
    };
    Ok(RouterGrads {
        d_proj_q,
        d_proj_k,
        d_q: unpool(&d_qbar, cache.bq),
        d_k: unpool(&d_kbar, cache.bk),
    })
}

/// Row-wise hard Top-k: the `κ` largest entries of each row become 1. Ties go
/// to the lowest column index.
pub fn hard_topk<T: Real>(pc: &Matrix<T>, k_percent: f64) -> Result<BlockMask> {
    check_k_percent(k_percent)?;
    let (tm, tn) = pc.shape();
    let keep = keep_count(k_percent, tn);
    let mut bits = vec![false; tm * tn];
    let mut order: Vec<usize> = Vec::with_capacity(tn);
    for i in 0..tm {
        let row = pc.row(i);
        order.clear();
        order.extend(0..tn);
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        for &j in &order[..keep] {
            bits[i * tn + j] = true;
        }
    }
    BlockMask::from_bits(tm, tn, bits)
}

/// Sigmoid relaxation of Top-k: `σ(pc_ij / τ + λ_i)` with `λ_i` bisected so
/// each row sums to `κ`.
pub fn soft_topk(pc: &Mat, k_percent: f64, tau: f64) -> Result<SoftMask> {
    check_k_percent(k_percent)?;
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (tm, tn) = pc.shape();
    let keep = keep_count(k_percent, tn);
    let target = keep as f64;
    let mut lambdas = Vec::with_capacity(tm);
    for i in 0..tm {
        let row = pc.row(i);
        let row_sum = |lambda: f64| row.iter().map(|&x| sigmoid(x / tau + lambda)).sum::<f64>();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut lo = -max / tau - BRACKET_MARGIN;
        let mut hi = -min / tau + BRACKET_MARGIN;
        let mut mid = 0.5 * (lo + hi);
        let mut residual = row_sum(mid) - target;
        for _ in 0..MAX_BISECTION_ITERS {
            if residual.abs() <= 1e-12 * target {
                break;
            }
            if residual > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            let next = 0.5 * (lo + hi);
            if next == mid {
                break;
            }
            mid = next;
            residual = row_sum(mid) - target;
        }
        if residual.abs() > SOFT_ROW_TOL {
            return Err(Error::Bisection { row: i, residual });
        }
        lambdas.push(mid);
    }
    let lambdas = Vector::new(lambdas)?;
    let values = soft_values(pc, &lambdas, tau);
    Ok(SoftMask {
        values,
        lambdas,
        keep_per_row: keep,
        tau,
    })
}

/// Soft mask values for given (frozen) offsets; the building block of the
/// frozen-λ gradient rule.
pub fn soft_values(pc: &Mat, lambdas: &Vector, tau: f64) -> Mat {
    Mat::from_fn(pc.rows(), pc.cols(), |i, j| {
        sigmoid(pc.get(i, j) / tau + lambdas.get(i))
    })
}

/// Gradient through [`soft_topk`] with `λ` held fixed: diagonal
/// `w(1 − w)/τ`.
pub fn soft_topk_backward(pc: &Mat, soft: &SoftMask, upstream: &Mat) -> Result<Mat> {
    pc.expect_same_shape(&soft.values)?;
    pc.expect_same_shape(upstream)?;
    let inv_tau = 1.0 / soft.tau;
    soft.values
        .zip_map(upstream, |w, g| g * w * (1.0 - w) * inv_tau)
}

/// Expands a block mask to token resolution. Oracle paths only.
pub fn expand_mask(mc: &BlockMask, bq: usize, bk: usize) -> Mat {
    Mat::from_fn(mc.tm() * bq, mc.tn() * bk, |r, c| {
        if mc.get(r / bq, c / bk) {
            1.0
        } else {
            0.0
        }
    })
}
