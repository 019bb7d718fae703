//! Dense N×N reference paths. These materialize every score matrix and exist
//! to check the streaming kernel and the decomposition algebra.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, matmul, mean_pool, row_softmax, rowsum, Mat, Matrix, Real, Vector};
use crate::quant::smooth_k;
use crate::router::{keep_count, BlockMask, RouterOutput};

use super::{check_routing_geometry, AttentionInputs, ForwardOptions, MixRatio};

/// Pre-softmax score given to masked-out entries on the dense path.
const MASKED_SCORE: f64 = -1e9;

fn scores<T: Real>(q: &Matrix<T>, k: &Matrix<T>) -> Result<Matrix<T>> {
    let scale = T::one() / T::c((q.cols() as f64).sqrt());
    Ok(matmul(q, k, true)?.scale(scale))
}

/// `softmax(QKᵀ/√d)·V`.
pub fn full_attention<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    if q.shape() != k.shape() || k.rows() != v.rows() {
        return shape_err(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    matmul(&row_softmax(&scores(q, k)?), v, false)
}

#[derive(Clone, Debug)]
pub struct FullAttentionGrads {
    pub dq: Mat,
    pub dk: Mat,
    pub dv: Mat,
}

/// Dense backward of [`full_attention`].
pub fn full_attention_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    d_out: &Mat,
) -> Result<FullAttentionGrads> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let p = row_softmax(&scores(q, k)?);
    let out = matmul(&p, v, false)?;
    out.expect_same_shape(d_out)?;
    let dv = matmul(&p.transpose(), d_out, false)?;
    let dp = matmul(d_out, v, true)?;
    let mut ds = Mat::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let delta = dot(d_out.row(r), out.row(r));
        for (c, slot) in ds.row_mut(r).iter_mut().enumerate() {
            *slot = p.get(r, c) * (dp.get(r, c) - delta) * scale;
        }
    }
    Ok(FullAttentionGrads {
        dq: matmul(&ds, k, false)?,
        dk: matmul(&ds.transpose(), q, false)?,
        dv,
    })
}

/// The exact split of full attention by a mask.
#[derive(Clone, Debug)]
pub struct DecompositionView {
    pub p_full: Mat,
    pub p1: Mat,
    pub p2: Mat,
    /// Row masses of `p1`.
    pub alpha_star: Vector,
    /// `p1` with rows renormalized; zero rows where `alpha_star == 0`.
    pub p_s: Mat,
}

/// Splits `P = softmax(S)` into the masked part `P₁ = P⊙M` and the rest
/// `P₂`, with `α* = P₁·1` and `P_s = P₁/α*`. Checks `P₁V = α*⊙(P_sV)`
/// before returning.
pub fn decompose(inputs: &AttentionInputs<f64>, mask: &BlockMask) -> Result<DecompositionView> {
    if mask.tm() != inputs.tm() || mask.tn() != inputs.tn() {
        return shape_err("mask geometry does not match inputs");
    }
    let p_full = row_softmax(&scores(&inputs.q, &inputs.k)?);
    let n = inputs.n();
    let m = |r: usize, c: usize| mask.get(r / inputs.bq, c / inputs.bk);
    let p1 = Mat::from_fn(n, n, |r, c| if m(r, c) { p_full.get(r, c) } else { 0.0 });
    let p2 = Mat::from_fn(n, n, |r, c| if m(r, c) { 0.0 } else { p_full.get(r, c) });
    let alpha_star = rowsum(&p1);
    let p_s = Mat::from_fn(n, n, |r, c| {
        let a = alpha_star.get(r);
        if a > 0.0 {
            p1.get(r, c) / a
        } else {
            0.0
        }
    });
    let view = DecompositionView {
        p_full,
        p1,
        p2,
        alpha_star,
        p_s,
    };
    let lhs = matmul(&view.p1, &inputs.v, false)?;
    let rhs = scale_rows(
        &matmul(&view.p_s, &inputs.v, false)?,
        view.alpha_star.data(),
    );
    let err = lhs.max_abs_diff(&rhs);
    if err > 1e-10 {
        return Err(Error::Consistency(format!(
            "masked-mass identity off by {err:e}"
        )));
    }
    Ok(view)
}

fn scale_rows(m: &Mat, s: &[f64]) -> Mat {
    Mat::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) * s[r])
}

/// `P₂V + (α* − 1)⊙O_s`, checked against `O_f − O_s`.
///
/// This is what a learned correction on the linear output has to absorb when
/// the sparse output is not rescaled by its true mass.
pub fn sla_residual_identity(view: &DecompositionView, v: &Mat, o_s: &Mat) -> Result<Mat> {
    let p2v = matmul(&view.p2, v, false)?;
    let shifted: Vec<f64> = view.alpha_star.data().iter().map(|a| a - 1.0).collect();
    let residual = p2v.add(&scale_rows(o_s, &shifted))?;
    let o_f = matmul(&view.p_full, v, false)?;
    let err = residual.max_abs_diff(&o_f.sub(o_s)?);
    if err > 1e-10 {
        return Err(Error::Consistency(format!(
            "residual identity off by {err:e}"
        )));
    }
    Ok(residual)
}

/// Output and routing of the heuristic sparse + linear baseline.
#[derive(Clone, Debug)]
pub struct SlaBaseline {
    pub output: Mat,
    /// Blocks computed with softmax attention.
    pub sparse: BlockMask,
    /// Blocks handled by the linear branch, row-major `tm x tn`.
    pub linear: Vec<bool>,
}

/// Heuristic baseline: pooled-score Top-`k_h`% to softmax attention, bottom
/// `k_l`% skipped, the remainder to linear attention, and
/// `O = O_s + O_l·proj`.
pub fn sla_baseline_forward(
    inputs: &AttentionInputs<f64>,
    k_h: f64,
    k_l: f64,
    proj: &Mat,
) -> Result<SlaBaseline> {
    let d = inputs.d();
    if proj.shape() != (d, d) {
        return shape_err(format!("projection must be {d}x{d}"));
    }
    if !(k_h > 0.0 && k_l >= 0.0 && k_h + k_l <= 100.0) {
        return Err(Error::Config(format!(
            "need 0 < k_h, 0 <= k_l, k_h + k_l <= 100; got {k_h}, {k_l}"
        )));
    }
    let (tm, tn, bq, bk) = (inputs.tm(), inputs.tn(), inputs.bq, inputs.bk);
    let pc = row_softmax(&scores(
        &mean_pool(&inputs.q, bq)?,
        &mean_pool(&inputs.k, bk)?,
    )?);
    let keep_hi = keep_count(k_h, tn);
    let skip = ((k_l / 100.0 * tn as f64).round() as usize).min(tn - keep_hi);
    let mut sparse = vec![false; tm * tn];
    let mut linear = vec![false; tm * tn];
    for i in 0..tm {
        let row = pc.row(i);
        let mut order: Vec<usize> = (0..tn).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        for (rank, &j) in order.iter().enumerate() {
            if rank < keep_hi {
                sparse[i * tn + j] = true;
            } else if rank < tn - skip {
                linear[i * tn + j] = true;
            }
        }
    }
    let sparse = BlockMask::from_bits(tm, tn, sparse)?;

    let n = inputs.n();
    let s = scores(&inputs.q, &inputs.k)?;
    let mut p = Mat::zeros(n, n);
    for r in 0..n {
        let i = r / bq;
        let row = p.row_mut(r);
        for (c, slot) in row.iter_mut().enumerate() {
            *slot = if sparse.get(i, c / bk) {
                s.get(r, c)
            } else {
                MASKED_SCORE
            };
        }
        crate::numerics::softmax_in_place(row);
    }
    let o_s = matmul(&p, &inputs.v, false)?;

    let q_phi = row_softmax(&inputs.q);
    let k_phi = row_softmax(&inputs.k);
    let kernel = matmul(&q_phi, &k_phi, true)?;
    let mut o_l = Mat::zeros(n, d);
    for r in 0..n {
        let i = r / bq;
        let mut den = 0.0;
        let mut acc = vec![0.0; d];
        for c in 0..n {
            if linear[i * tn + c / bk] {
                let w = kernel.get(r, c);
                den += w;
                for (a, &x) in acc.iter_mut().zip(inputs.v.row(c)) {
                    *a += w * x;
                }
            }
        }
        if den > 0.0 {
            for (o, a) in o_l.row_mut(r).iter_mut().zip(acc) {
                *o = a / den;
            }
        }
    }
    let output = o_s.add(&matmul(&o_l, proj, false)?)?;
    Ok(SlaBaseline {
        output,
        sparse,
        linear,
    })
}

/// Every intermediate of the dense α-mixed operator.
#[derive(Clone, Debug)]
pub struct NaiveParts<T: Real = f64> {
    /// Row-normalized sparse-branch probabilities.
    pub p_s: Matrix<T>,
    /// Row-normalized linear-branch weights (zero rows when the branch is empty).
    pub p_l: Matrix<T>,
    pub o_s: Matrix<T>,
    pub o_l: Matrix<T>,
    /// Effective α per token row (forced to 1 where the linear branch is empty).
    pub alpha_rows: Vec<T>,
    pub output: Matrix<T>,
}

/// Dense reference of the α-mixed operator; see [`sla2_naive_parts`].
pub fn sla2_forward_naive<T: Real>(
    inputs: &AttentionInputs<T>,
    routing: &RouterOutput,
    alpha: &MixRatio,
    opts: &ForwardOptions,
) -> Result<Matrix<T>> {
    Ok(sla2_naive_parts(inputs, routing, alpha, opts)?.output)
}

/// Dense reference: `O_s = softmax over kept entries · V`,
/// `O_l = norm(φ(Q)φ(K)ᵀ ⊙ (1 − M))·V`, `O = α⊙O_s + (1 − α)⊙O_l`.
///
/// Soft routing weights `w` scale the sparse-branch probabilities and `1 − w`
/// scales the linear kernel. Quantization is not available on this path.
pub fn sla2_naive_parts<T: Real>(
    inputs: &AttentionInputs<T>,
    routing: &RouterOutput,
    alpha: &MixRatio,
    opts: &ForwardOptions,
) -> Result<NaiveParts<T>> {
    check_routing_geometry(inputs, routing.tm(), routing.tn(), alpha)?;
    if opts.quant.is_some() {
        return Err(Error::Contract(
            "the dense reference path does not quantize".into(),
        ));
    }
    if routing.keep_per_row() == 0 {
        return Err(Error::Contract(
            "every query block must keep a key block".into(),
        ));
    }
    let (n, bq, bk) = (inputs.n(), inputs.bq, inputs.bk);
    let k = if opts.smooth_k {
        smooth_k(&inputs.k).0
    } else {
        inputs.k.clone()
    };
    let s = scores(&inputs.q, &k)?;
    let masked = T::c(MASKED_SCORE);

    let mut p_s = Matrix::<T>::zeros(n, n);
    for r in 0..n {
        let i = r / bq;
        let srow = s.row(r);
        let row = p_s.row_mut(r);
        let mut max = T::neg_infinity();
        for (c, slot) in row.iter_mut().enumerate() {
            *slot = if routing.weight(i, c / bk) > 0.0 {
                srow[c]
            } else {
                masked
            };
            max = max.max(*slot);
        }
        let mut sum = T::zero();
        for (c, slot) in row.iter_mut().enumerate() {
            let w = routing.weight(i, c / bk);
            *slot = if w > 0.0 {
                T::c(w) * (*slot - max).exp()
            } else {
                (*slot - max).exp()
            };
            sum = sum + *slot;
        }
        for slot in row.iter_mut() {
            *slot = *slot / sum;
        }
    }
    let o_s = matmul(&p_s, &inputs.v, false)?;

    let kernel = matmul(&row_softmax(&inputs.q), &row_softmax(&k), true)?;
    let mut p_l = Matrix::<T>::zeros(n, n);
    let mut alpha_rows = Vec::with_capacity(n);
    for r in 0..n {
        let i = r / bq;
        let row = p_l.row_mut(r);
        let mut sum = T::zero();
        for (c, slot) in row.iter_mut().enumerate() {
            *slot = kernel.get(r, c) * T::c(1.0 - routing.weight(i, c / bk));
            sum = sum + *slot;
        }
        if sum > T::zero() {
            for slot in row.iter_mut() {
                *slot = *slot / sum;
            }
            alpha_rows.push(T::c(alpha.alpha(i)));
        } else {
            alpha_rows.push(T::one());
        }
    }
    let o_l = matmul(&p_l, &inputs.v, false)?;
    let d = inputs.d();
    let output = Matrix::from_fn(n, d, |r, c| {
        let a = alpha_rows[r];
        a * o_s.get(r, c) + (T::one() - a) * o_l.get(r, c)
    });
    Ok(NaiveParts {
        p_s,
        p_l,
        o_s,
        o_l,
        alpha_rows,
        output,
    })
}
