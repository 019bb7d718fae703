//! Attention mathematics: the dense oracle, the sparse/linear decomposition
//! identities, the pooled-heuristic baseline, and the α-mixed sparse + linear
//! operator in both a dense reference form and a block-streaming form with a
//! hand-written backward.

mod backward;
mod blockwise;
mod dense;

pub use backward::{sla2_backward, BackwardOptions, Fault, Sla2Grads};
pub use blockwise::{sla2_forward_blockwise, ForwardOptions, Sla2Saved};
pub use dense::{
    decompose, full_attention, full_attention_backward, sla2_forward_naive, sla2_naive_parts,
    sla_baseline_forward, sla_residual_identity, DecompositionView, FullAttentionGrads, NaiveParts,
    SlaBaseline,
};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{sigmoid, Matrix, Real};

/// Q, K, V of one head plus the block geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionInputs<T: Real = f64> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub bq: usize,
    pub bk: usize,
}

impl<T: Real> AttentionInputs<T> {
    pub fn new(q: Matrix<T>, k: Matrix<T>, v: Matrix<T>, bq: usize, bk: usize) -> Result<Self> {
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return shape_err(format!(
                "q {:?}, k {:?}, v {:?} must agree",
                q.shape(),
                k.shape(),
                v.shape()
            ));
        }
        let n = q.rows();
        if bq == 0 || bk == 0 || !n.is_multiple_of(bq) || !n.is_multiple_of(bk) {
            return shape_err(format!(
                "sequence length {n} not divisible by block sizes {bq}/{bk}"
            ));
        }
        Ok(Self { q, k, v, bq, bk })
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn d(&self) -> usize {
        self.q.cols()
    }

    pub fn tm(&self) -> usize {
        self.n() / self.bq
    }

    pub fn tn(&self) -> usize {
        self.n() / self.bk
    }

    pub fn cast<U: Real>(&self) -> AttentionInputs<U> {
        AttentionInputs {
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            bq: self.bq,
            bk: self.bk,
        }
    }
}

/// Per-query-block mixing logits; `α_i = σ(rho_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixRatio {
    pub rho: Vec<f64>,
}

impl MixRatio {
    /// `rho = 0`, i.e. `α = 0.5` everywhere.
    pub fn zeros(tm: usize) -> Self {
        Self { rho: vec![0.0; tm] }
    }

    pub fn constant(tm: usize, rho: f64) -> Self {
        Self { rho: vec![rho; tm] }
    }

    pub fn from_rho(rho: Vec<f64>) -> Result<Self> {
        if rho.iter().any(|r| !r.is_finite()) {
            return Err(Error::Contract("mixing logits must be finite".into()));
        }
        Ok(Self { rho })
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    #[inline]
    pub fn alpha(&self, block: usize) -> f64 {
        sigmoid(self.rho[block])
    }
}

pub(crate) fn check_routing_geometry<T: Real>(
    inputs: &AttentionInputs<T>,
    tm: usize,
    tn: usize,
    alpha: &MixRatio,
) -> Result<()> {
    if tm != inputs.tm() || tn != inputs.tn() {
        return shape_err(format!(
            "routing is {tm}x{tn} but blocks give {}x{}",
            inputs.tm(),
            inputs.tn()
        ));
    }
    if alpha.len() != tm {
        return shape_err(format!(
            "mix ratio has {} entries for {tm} query blocks",
            alpha.len()
        ));
    }
    Ok(())
}
