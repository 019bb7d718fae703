//! Block-streaming forward of the α-mixed sparse + linear operator.
//!
//! For each query block the kept key blocks are folded into an online softmax
//! (running max `m`, running sum `l`), while the remaining key blocks only add
//! their precomputed `h_j = φ(K_j)ᵀV_j` and `z_j = colsum(φ(K_j))` to the
//! linear accumulators `H_i`, `Z_i`. No N×N matrix is ever formed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, gemm_rows_into, row_softmax, Matrix, Real};
use crate::quant::{
    dequantize, quantize, quantized_product, smooth_k, QuantConfig, QuantizedBlock,
};
use crate::router::RouterOutput;

use super::{check_routing_geometry, AttentionInputs, MixRatio};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardOptions {
    /// Subtract the column mean of K before anything else.
    #[serde(default = "default_smooth")]
    pub smooth_k: bool,
    /// Fake-quantize the sparse branch products.
    #[serde(default)]
    pub quant: Option<QuantConfig>,
}

fn default_smooth() -> bool {
    true
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            smooth_k: true,
            quant: None,
        }
    }
}

impl ForwardOptions {
    pub fn quantized(quant: QuantConfig) -> Self {
        Self {
            smooth_k: true,
            quant: Some(quant),
        }
    }
}

/// Everything the backward needs from the forward.
#[derive(Clone, Debug)]
pub struct Sla2Saved<T: Real = f64> {
    pub o_s: Matrix<T>,
    pub o_l: Matrix<T>,
    /// Per-row log-sum-exp of the (weighted) kept scores, `m + ln l`.
    pub lse: Vec<T>,
    /// Linear accumulators `H_i` (d×d each).
    pub h_blocks: Vec<Matrix<T>>,
    /// Linear normalizers `Z_i` (length d each).
    pub z_blocks: Vec<Vec<T>>,
    pub routing: RouterOutput,
    /// Keys as used by the kernel (smoothed if enabled).
    pub k_used: Matrix<T>,
    pub q_phi: Matrix<T>,
    pub k_phi: Matrix<T>,
    /// Query blocks whose linear branch received no key block.
    pub linear_empty: Vec<bool>,
    pub smooth_k: bool,
    /// Quantization used by the forward. Recorded only; the backward never
    /// reads it.
    pub quant: Option<QuantConfig>,
}

struct BlockResult<T> {
    out: Vec<T>,
    o_s: Vec<T>,
    o_l: Vec<T>,
    lse: Vec<T>,
    h: Vec<T>,
    z: Vec<T>,
    linear_empty: bool,
}

/// Streaming forward. Returns the mixed output and the saved state.
pub fn sla2_forward_blockwise<T: Real>(
    inputs: &AttentionInputs<T>,
    routing: &RouterOutput,
    alpha: &MixRatio,
    opts: &ForwardOptions,
) -> Result<(Matrix<T>, Sla2Saved<T>)> {
    check_routing_geometry(inputs, routing.tm(), routing.tn(), alpha)?;
    if routing.keep_per_row() == 0 {
        return Err(Error::Contract(
            "every query block must keep a key block".into(),
        ));
    }
    if let Some(q) = &opts.quant {
        q.validate()?;
    }
    let (n, d, bq, bk, tm, tn) = (
        inputs.n(),
        inputs.d(),
        inputs.bq,
        inputs.bk,
        inputs.tm(),
        inputs.tn(),
    );
    let k_used = if opts.smooth_k {
        smooth_k(&inputs.k).0
    } else {
        inputs.k.clone()
    };
    let q_phi = row_softmax(&inputs.q);
    let k_phi = row_softmax(&k_used);
    let v = &inputs.v;

    // h_j and z_j for every key block
    let mut h_all = vec![T::zero(); tn * d * d];
    let mut z_all = vec![T::zero(); tn * d];
    for j in 0..tn {
        let h = &mut h_all[j * d * d..(j + 1) * d * d];
        let z = &mut z_all[j * d..(j + 1) * d];
        for c in j * bk..(j + 1) * bk {
            let kr = k_phi.row(c);
            let vr = v.row(c);
            for (a, &ka) in kr.iter().enumerate() {
                z[a] = z[a] + ka;
                for (hb, &vb) in h[a * d..(a + 1) * d].iter_mut().zip(vr) {
                    *hb = *hb + ka * vb;
                }
            }
        }
    }

    let quant = opts.quant;
    let qk_quant = quant.is_some_and(|q| q.qk_product);
    let pv_quant = quant.is_some_and(|q| q.pv_product);
    let k_t_blocks: Vec<Matrix<T>> = (0..tn)
        .map(|j| k_used.row_block(j * bk, bk).transpose())
        .collect();
    let k_q: Vec<QuantizedBlock> = if qk_quant {
        (0..tn)
            .map(|j| quantize(&k_used.row_block(j * bk, bk)))
            .collect()
    } else {
        Vec::new()
    };
    let v_q: Vec<QuantizedBlock> = if pv_quant {
        (0..tn)
            .map(|j| quantize(&v.row_block(j * bk, bk)))
            .collect()
    } else {
        Vec::new()
    };
    let scale = T::one() / T::c((d as f64).sqrt());

    let process = |i: usize| -> Result<BlockResult<T>> {
        let q_block = inputs.q.row_block(i * bq, bq);
        let q_quant = qk_quant.then(|| quantize(&q_block));
        let mut m = vec![T::neg_infinity(); bq];
        let mut l = vec![T::zero(); bq];
        let mut acc = vec![T::zero(); bq * d];
        let mut h = vec![T::zero(); d * d];
        let mut z = vec![T::zero(); d];
        let mut s = vec![T::zero(); bq * bk];
        let mut linear_mass = false;
        for j in 0..tn {
            let w = routing.weight(i, j);
            if w > 0.0 {
                let wt = T::c(w);
                if let Some(qq) = &q_quant {
                    let prod: Matrix<T> = quantized_product(qq, &k_q[j], true)?;
                    s.copy_from_slice(prod.data());
                } else {
                    s.iter_mut().for_each(|x| *x = T::zero());
                    gemm_rows_into(q_block.data(), d, k_t_blocks[j].data(), bk, &mut s);
                }
                // online softmax update; s becomes exp(S - m_new) in place
                let mut corr = vec![T::zero(); bq];
                for r in 0..bq {
                    let row = &mut s[r * bk..(r + 1) * bk];
                    let mut row_max = T::neg_infinity();
                    for x in row.iter_mut() {
                        *x = *x * scale;
                        row_max = row_max.max(*x);
                    }
                    let m_new = m[r].max(row_max);
                    let mut sum = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - m_new).exp();
                        sum = sum + *x;
                    }
                    corr[r] = (m[r] - m_new).exp();
                    l[r] = corr[r] * l[r] + wt * sum;
                    m[r] = m_new;
                }
                let tmp: Vec<T> = if pv_quant {
                    let p = Matrix::from_raw(bq, bk, s.clone());
                    quantized_product(&quantize(&p), &v_q[j], false)?.into_data()
                } else {
                    let mut t = vec![T::zero(); bq * d];
                    gemm_rows_into(&s, bk, v.row_block(j * bk, bk).data(), d, &mut t);
                    t
                };
                for r in 0..bq {
                    for (o, &t) in acc[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&tmp[r * d..(r + 1) * d])
                    {
                        *o = corr[r] * *o + wt * t;
                    }
                }
            }
            if w < 1.0 {
                linear_mass = true;
                let lw = T::c(1.0 - w);
                for (a, &b) in h.iter_mut().zip(&h_all[j * d * d..(j + 1) * d * d]) {
                    *a = *a + lw * b;
                }
                for (a, &b) in z.iter_mut().zip(&z_all[j * d..(j + 1) * d]) {
                    *a = *a + lw * b;
                }
            }
        }
        let mut o_s = acc;
        let mut lse = Vec::with_capacity(bq);
        for r in 0..bq {
            let inv = T::one() / l[r];
            o_s[r * d..(r + 1) * d]
                .iter_mut()
                .for_each(|x| *x = *x * inv);
            lse.push(m[r] + l[r].ln());
        }
        let mut o_l = vec![T::zero(); bq * d];
        if linear_mass {
            for r in 0..bq {
                let qr = q_phi.row(i * bq + r);
                let den = dot(qr, &z);
                let out = &mut o_l[r * d..(r + 1) * d];
                gemm_rows_into(qr, d, &h, d, out);
                out.iter_mut().for_each(|x| *x = *x / den);
            }
        }
        let a = if linear_mass {
            T::c(alpha.alpha(i))
        } else {
            T::one()
        };
        let out = o_s
            .iter()
            .zip(&o_l)
            .map(|(&s, &l)| a * s + (T::one() - a) * l)
            .collect();
        Ok(BlockResult {
            out,
            o_s,
            o_l,
            lse,
            h,
            z,
            linear_empty: !linear_mass,
        })
    };

    let blocks: Vec<BlockResult<T>> = (0..tm)
        .into_par_iter()
        .map(process)
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(n * d);
    let mut o_s = Vec::with_capacity(n * d);
    let mut o_l = Vec::with_capacity(n * d);
    let mut lse = Vec::with_capacity(n);
    let mut h_blocks = Vec::with_capacity(tm);
    let mut z_blocks = Vec::with_capacity(tm);
    let mut linear_empty = Vec::with_capacity(tm);
    for b in blocks {
        out.extend(b.out);
        o_s.extend(b.o_s);
        o_l.extend(b.o_l);
        lse.extend(b.lse);
        h_blocks.push(Matrix::from_raw(d, d, b.h));
        z_blocks.push(b.z);
        linear_empty.push(b.linear_empty);
    }
    let saved = Sla2Saved {
        o_s: Matrix::from_raw(n, d, o_s),
        o_l: Matrix::from_raw(n, d, o_l),
        lse,
        h_blocks,
        z_blocks,
        routing: routing.clone(),
        k_used,
        q_phi,
        k_phi,
        linear_empty,
        smooth_k: opts.smooth_k,
        quant,
    };
    Ok((Matrix::from_raw(n, d, out), saved))
}

/// Dequantizes for inspection; handy in tests of the quantized path.
#[allow(dead_code)]
pub(crate) fn fake_quant<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    dequantize(&quantize(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{full_attention, sla2_forward_naive, sla2_naive_parts};
    use crate::numerics::Mat;
    use crate::router::{hard_topk, soft_topk, BlockMask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn inputs(n: usize, d: usize, bq: usize, bk: usize, seed: u64) -> AttentionInputs {
        AttentionInputs::new(
            random(n, d, seed).scale(2.0),
            random(n, d, seed + 1).scale(2.0).map(|x| x + 0.5),
            random(n, d, seed + 2),
            bq,
            bk,
        )
        .unwrap()
    }

    #[test]
    fn matches_naive_hard() {
        let x = inputs(64, 8, 8, 4, 1);
        let mask = RouterOutput::Hard(hard_topk(&random(8, 16, 4), 20.0).unwrap());
        let alpha = MixRatio::from_rho(random(8, 1, 5).into_data()).unwrap();
        let opts = ForwardOptions::default();
        let (o, _) = sla2_forward_blockwise(&x, &mask, &alpha, &opts).unwrap();
        let naive = sla2_forward_naive(&x, &mask, &alpha, &opts).unwrap();
        assert!(o.max_abs_diff(&naive) <= 1e-12);
    }

    #[test]
    fn matches_naive_soft() {
        let x = inputs(32, 4, 4, 4, 2);
        let pc = crate::numerics::row_softmax(&random(8, 8, 3));
        let soft = RouterOutput::Soft(soft_topk(&pc, 25.0, 0.1).unwrap());
        let alpha = MixRatio::zeros(8);
        let opts = ForwardOptions::default();
        let (o, _) = sla2_forward_blockwise(&x, &soft, &alpha, &opts).unwrap();
        let naive = sla2_forward_naive(&x, &soft, &alpha, &opts).unwrap();
        assert!(o.max_abs_diff(&naive) <= 1e-12);
    }

    #[test]
    fn full_mask_degenerates_to_full_attention() {
        let x = inputs(32, 4, 4, 8, 3);
        let mask = RouterOutput::Hard(BlockMask::all_ones(8, 4));
        let (o, saved) =
            sla2_forward_blockwise(&x, &mask, &MixRatio::zeros(8), &ForwardOptions::default())
                .unwrap();
        assert!(saved.linear_empty.iter().all(|&e| e));
        assert_eq!(o, saved.o_s);
        let full = full_attention(&x.q, &x.k, &x.v).unwrap();
        assert!(o.max_abs_diff(&full) <= 1e-12);
    }

    #[test]
    fn single_kept_block_lse() {
        let x = inputs(16, 4, 4, 4, 4);
        let bits = (0..16).map(|t| t % 4 == (t / 4) % 4).collect();
        let mask = BlockMask::from_bits(4, 4, bits).unwrap();
        let routing = RouterOutput::Hard(mask.clone());
        let opts = ForwardOptions::default();
        let (_, saved) = sla2_forward_blockwise(&x, &routing, &MixRatio::zeros(4), &opts).unwrap();
        for r in 0..16 {
            let j = mask.kept_in_row(r / 4).next().unwrap();
            let s: Vec<f64> = (j * 4..j * 4 + 4)
                .map(|c| dot(x.q.row(r), saved.k_used.row(c)) / 2.0)
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            assert!((saved.lse[r] - lse).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_does_not_change_sparse_branch() {
        let x = inputs(32, 4, 4, 4, 5);
        let mask = RouterOutput::Hard(hard_topk(&random(8, 8, 1), 25.0).unwrap());
        let alpha = MixRatio::zeros(8);
        let (_, a) = sla2_forward_blockwise(&x, &mask, &alpha, &ForwardOptions::default()).unwrap();
        let raw = ForwardOptions {
            smooth_k: false,
            quant: None,
        };
        let (_, b) = sla2_forward_blockwise(&x, &mask, &alpha, &raw).unwrap();
        assert!(a.o_s.max_abs_diff(&b.o_s) <= 1e-10);
        assert!(a.o_l.max_abs_diff(&b.o_l) > 1e-6);
    }

    #[test]
    fn quantized_forward_stays_close() {
        let x = inputs(64, 8, 8, 8, 6);
        let mask = RouterOutput::Hard(hard_topk(&random(8, 8, 2), 25.0).unwrap());
        let alpha = MixRatio::zeros(8);
        let (exact, _) =
            sla2_forward_blockwise(&x, &mask, &alpha, &ForwardOptions::default()).unwrap();
        let (q, saved) = sla2_forward_blockwise(
            &x,
            &mask,
            &alpha,
            &ForwardOptions::quantized(QuantConfig::int8()),
        )
        .unwrap();
        let dev = exact.max_abs_diff(&q);
        assert!(dev > 0.0 && dev <= 5e-2, "deviation {dev}");
        assert!(saved.quant.is_some());
    }

    #[test]
    fn single_precision_tracks_double() {
        let x = inputs(64, 8, 8, 4, 7);
        let mask = RouterOutput::Hard(hard_topk(&random(8, 16, 3), 10.0).unwrap());
        let alpha = MixRatio::zeros(8);
        let opts = ForwardOptions::default();
        let (o64, _) = sla2_forward_blockwise(&x, &mask, &alpha, &opts).unwrap();
        let (o32, _) = sla2_forward_blockwise(&x.cast::<f32>(), &mask, &alpha, &opts).unwrap();
        assert!(o32.cast::<f64>().max_abs_diff(&o64) <= 1e-5);
    }

    #[test]
    fn normalization_of_mixed_weights() {
        let x = inputs(32, 4, 4, 4, 8);
        let mask = RouterOutput::Hard(hard_topk(&random(8, 8, 5), 25.0).unwrap());
        let parts = sla2_naive_parts(
            &x,
            &mask,
            &MixRatio::constant(8, 0.7),
            &ForwardOptions::default(),
        )
        .unwrap();
        for r in 0..32 {
            let a = parts.alpha_rows[r];
            let s: f64 = (0..32)
                .map(|c| a * parts.p_s.get(r, c) + (1.0 - a) * parts.p_l.get(r, c))
                .sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_mismatched_routing() {
        let x = inputs(32, 4, 4, 4, 9);
        let mask = RouterOutput::Hard(BlockMask::all_ones(4, 4));
        assert!(
            sla2_forward_blockwise(&x, &mask, &MixRatio::zeros(4), &ForwardOptions::default())
                .is_err()
        );
        let zero = RouterOutput::Hard(BlockMask::all_zeros(8, 8));
        assert!(matches!(
            sla2_forward_blockwise(&x, &zero, &MixRatio::zeros(8), &ForwardOptions::default()),
            Err(Error::Contract(_))
        ));
    }
}
