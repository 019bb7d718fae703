//! Hand-written backward of the block-streaming operator.
//!
//! Sparse blocks recompute `P = w·exp(S − L)` from the saved log-sum-exp;
//! linear blocks reuse the saved `H_i`, `Z_i`. dK/dV run key-block-parallel
//! and dQ query-block-parallel; each output row has a single owner, so the
//! summation order is fixed regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::numerics::{dot, Mat};
use crate::quant::smooth_k_backward;

use super::{check_routing_geometry, AttentionInputs, MixRatio, Sla2Saved};

/// Deliberate bugs for checking that the gradient tests can see them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// The linear-branch dV overwrites the sparse-branch dV instead of adding.
    DvAssign,
}

#[derive(Debug, Clone, Default)]
pub struct BackwardOptions {
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone)]
pub struct Sla2Grads {
    pub dq: Mat,
    /// Gradient w.r.t. the raw keys (smoothing already undone).
    pub dk: Mat,
    pub dv: Mat,
    pub d_rho: Vec<f64>,
    /// Gradient w.r.t. the routing weights; only for soft routing.
    pub d_weights: Option<Mat>,
}

/// Gradients of `⟨d_out, O⟩` w.r.t. q, k, v, the mixing logits and, for
/// soft routing, the routing weights.
pub fn sla2_backward(
    inputs: &AttentionInputs<f64>,
    saved: &Sla2Saved<f64>,
    alpha: &MixRatio,
    d_out: &Mat,
    opts: &BackwardOptions,
) -> Result<Sla2Grads> {
    let routing = &saved.routing;
    check_routing_geometry(inputs, routing.tm(), routing.tn(), alpha)?;
    let (n, d, bq, bk, tm, tn) = (
        inputs.n(),
        inputs.d(),
        inputs.bq,
        inputs.bk,
        inputs.tm(),
        inputs.tn(),
    );
    if d_out.shape() != (n, d) {
        return shape_err(format!(
            "upstream gradient {:?}, expected ({n}, {d})",
            d_out.shape()
        ));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let (q, k, v) = (&inputs.q, &saved.k_used, &inputs.v);
    let (o_s, o_l) = (&saved.o_s, &saved.o_l);

    // split the upstream gradient between the branches
    let mut do_s = Mat::zeros(n, d);
    let mut do_l = Mat::zeros(n, d);
    let mut d_rho = vec![0.0; tm];
    let mut delta_s = vec![0.0; n];
    let mut delta_l = vec![0.0; n];
    for i in 0..tm {
        let empty = saved.linear_empty[i];
        let a = if empty { 1.0 } else { alpha.alpha(i) };
        let mut acc = 0.0;
        for r in i * bq..(i + 1) * bq {
            let g = d_out.row(r);
            for c in 0..d {
                do_s.set(r, c, a * g[c]);
                do_l.set(r, c, (1.0 - a) * g[c]);
                acc += g[c] * (o_s.get(r, c) - o_l.get(r, c));
            }
            delta_s[r] = dot(do_s.row(r), o_s.row(r));
            delta_l[r] = dot(do_l.row(r), o_l.row(r));
        }
        if !empty {
            d_rho[i] = acc * a * (1.0 - a);
        }
    }

    // linear branch, per query block
    let mut d_h = vec![Mat::zeros(d, d); tm];
    let mut d_z = vec![vec![0.0; d]; tm];
    let mut d_qphi = Mat::zeros(n, d);
    for i in 0..tm {
        if saved.linear_empty[i] {
            continue;
        }
        let h = &saved.h_blocks[i];
        let z = &saved.z_blocks[i];
        for r in i * bq..(i + 1) * bq {
            let qr = saved.q_phi.row(r);
            let den = dot(qr, z);
            let g = do_l.row(r);
            let dl = delta_l[r];
            let dh = d_h[i].data_mut();
            for a in 0..d {
                let qa = qr[a] / den;
                for b in 0..d {
                    dh[a * d + b] += qa * g[b];
                }
                d_z[i][a] -= qa * dl;
            }
            let out = d_qphi.row_mut(r);
            for a in 0..d {
                out[a] = (dot(h.row(a), g) - dl * z[a]) / den;
            }
        }
    }

    // P and dS of one sparse block, plus the unweighted Σ P·dP for dW
    let block_probs = |i: usize, j: usize, w: f64, e: &mut [f64], ds: &mut [f64]| -> f64 {
        let mut dw = 0.0;
        for (ri, r) in (i * bq..(i + 1) * bq).enumerate() {
            let qr = q.row(r);
            let g = do_s.row(r);
            let lse = saved.lse[r];
            for (ci, c) in (j * bk..(j + 1) * bk).enumerate() {
                let ex = (dot(qr, k.row(c)) * scale - lse).exp();
                let dp = dot(g, v.row(c)) - delta_s[r];
                e[ri * bk + ci] = w * ex;
                ds[ri * bk + ci] = w * ex * dp * scale;
                dw += ex * dp;
            }
        }
        dw
    };

    // key-block pass: dK and dV rows of block j are owned by one task
    struct KeyBlock {
        dk: Vec<f64>,
        dv: Vec<f64>,
        d_kphi: Option<Vec<f64>>,
        dw: Vec<f64>,
        /// dS per query block, reused by the dQ pass.
        ds: Vec<Option<Vec<f64>>>,
    }
    let key_block = |j: usize| -> KeyBlock {
        let mut dk = vec![0.0; bk * d];
        let mut dv = vec![0.0; bk * d];
        let mut dw_col = vec![0.0; tm];
        let mut e = vec![0.0; bq * bk];
        let mut ds_blocks = vec![None; tm];
        let mut dh_acc = vec![0.0; d * d];
        let mut dz_acc = vec![0.0; d];
        let mut linear_used = false;
        let hz = routing.is_soft().then(|| block_hz(&saved.k_phi, v, j, bk));
        for i in 0..tm {
            let w = routing.weight(i, j);
            if w > 0.0 {
                let mut ds = vec![0.0; bq * bk];
                dw_col[i] += block_probs(i, j, w, &mut e, &mut ds);
                for ri in 0..bq {
                    let r = i * bq + ri;
                    let (g, qr) = (do_s.row(r), q.row(r));
                    for ci in 0..bk {
                        let (p, s) = (e[ri * bk + ci], ds[ri * bk + ci]);
                        let dv_c = &mut dv[ci * d..(ci + 1) * d];
                        dv_c.iter_mut().zip(g).for_each(|(o, &x)| *o += p * x);
                        let dk_c = &mut dk[ci * d..(ci + 1) * d];
                        dk_c.iter_mut().zip(qr).for_each(|(o, &x)| *o += s * x);
                    }
                }
                ds_blocks[i] = Some(ds);
            }
            if w < 1.0 && !saved.linear_empty[i] {
                linear_used = true;
                let lw = 1.0 - w;
                for (a, &b) in dh_acc.iter_mut().zip(d_h[i].data()) {
                    *a += lw * b;
                }
                for (a, &b) in dz_acc.iter_mut().zip(&d_z[i]) {
                    *a += lw * b;
                }
                if let Some((hj, zj)) = hz.as_ref() {
                    dw_col[i] -= dot(d_h[i].data(), hj) + dot(&d_z[i], zj);
                }
            }
        }
        let mut d_kphi = None;
        if linear_used {
            let mut dkp = vec![0.0; bk * d];
            for ci in 0..bk {
                let c = j * bk + ci;
                let vc = v.row(c);
                let kc = saved.k_phi.row(c);
                for a in 0..d {
                    dkp[ci * d + a] = dot(&dh_acc[a * d..(a + 1) * d], vc) + dz_acc[a];
                }
                let mut lin_dv = vec![0.0; d];
                for (a, &ka) in kc.iter().enumerate() {
                    for (slot, &h) in lin_dv.iter_mut().zip(&dh_acc[a * d..(a + 1) * d]) {
                        *slot += ka * h;
                    }
                }
                let row = &mut dv[ci * d..(ci + 1) * d];
                match opts.fault {
                    Some(Fault::DvAssign) => row.copy_from_slice(&lin_dv),
                    None => row.iter_mut().zip(&lin_dv).for_each(|(s, l)| *s += l),
                }
            }
            d_kphi = Some(dkp);
        }
        KeyBlock {
            dk,
            dv,
            d_kphi,
            dw: dw_col,
            ds: ds_blocks,
        }
    };
    let key_blocks: Vec<KeyBlock> = (0..tn).into_par_iter().map(key_block).collect();

    // query-block pass: dQ rows of block i are owned by one task
    let query_block = |i: usize| -> Vec<f64> {
        let mut dq = vec![0.0; bq * d];
        for (j, kb) in key_blocks.iter().enumerate() {
            let Some(ds) = kb.ds[i].as_ref() else {
                continue;
            };
            for ri in 0..bq {
                let dq_r = &mut dq[ri * d..(ri + 1) * d];
                for ci in 0..bk {
                    let s = ds[ri * bk + ci];
                    dq_r.iter_mut()
                        .zip(k.row(j * bk + ci))
                        .for_each(|(o, &x)| *o += s * x);
                }
            }
        }
        dq
    };
    let dq_blocks: Vec<Vec<f64>> = (0..tm).into_par_iter().map(query_block).collect();

    let mut dq = Mat::from_raw(n, d, dq_blocks.concat());
    let mut dk = Mat::zeros(n, d);
    let mut dv = Mat::zeros(n, d);
    let mut d_kphi = Mat::zeros(n, d);
    let mut d_w = routing.is_soft().then(|| Mat::zeros(tm, tn));
    for (j, kb) in key_blocks.into_iter().enumerate() {
        let span = j * bk * d..(j + 1) * bk * d;
        dk.data_mut()[span.clone()].copy_from_slice(&kb.dk);
        dv.data_mut()[span.clone()].copy_from_slice(&kb.dv);
        if let Some(x) = kb.d_kphi {
            d_kphi.data_mut()[span].copy_from_slice(&x);
        }
        if let Some(m) = d_w.as_mut() {
            for (i, &x) in kb.dw.iter().enumerate() {
                m.set(i, j, x);
            }
        }
    }

    // feature-map softmax backward
    softmax_backward_add(&saved.q_phi, &d_qphi, &mut dq);
    softmax_backward_add(&saved.k_phi, &d_kphi, &mut dk);
    let dk = if saved.smooth_k {
        smooth_k_backward(&dk)
    } else {
        dk
    };
    Ok(Sla2Grads {
        dq,
        dk,
        dv,
        d_rho,
        d_weights: d_w,
    })
}

fn softmax_backward_add(y: &Mat, dy: &Mat, out: &mut Mat) {
    for r in 0..y.rows() {
        let yr = y.row(r);
        let g = dy.row(r);
        let inner = dot(yr, g);
        for (o, (&yv, &gv)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(g)) {
            *o += yv * (gv - inner);
        }
    }
}

/// `h_j = φ(K_j)ᵀV_j` and `z_j = colsum(φ(K_j))`.
fn block_hz(k_phi: &Mat, v: &Mat, j: usize, bk: usize) -> (Vec<f64>, Vec<f64>) {
    let d = v.cols();
    let mut h = vec![0.0; d * d];
    let mut z = vec![0.0; d];
    for c in j * bk..(j + 1) * bk {
        let kc = k_phi.row(c);
        let vc = v.row(c);
        for a in 0..d {
            z[a] += kc[a];
            for b in 0..d {
                h[a * d + b] += kc[a] * vc[b];
            }
        }
    }
    (h, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{sla2_forward_blockwise, ForwardOptions};
    use crate::quant::QuantConfig;
    use crate::router::{hard_topk, soft_topk, RouterOutput};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn inputs(seed: u64) -> AttentionInputs {
        AttentionInputs::new(
            random(16, 4, seed).scale(1.5),
            random(16, 4, seed + 1).scale(1.5).map(|x| x + 0.3),
            random(16, 4, seed + 2),
            4,
            2,
        )
        .unwrap()
    }

    fn loss(x: &AttentionInputs, r: &RouterOutput, a: &MixRatio, g: &Mat) -> f64 {
        let (o, _) = sla2_forward_blockwise(x, r, a, &ForwardOptions::default()).unwrap();
        o.hadamard(g).unwrap().sum()
    }

    fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(floor)
    }

    fn check_matrix(analytic: &Mat, f: impl Fn(&Mat) -> f64, at: &Mat) -> f64 {
        let h = 1e-6;
        let mut numeric = Mat::zeros(at.rows(), at.cols());
        for idx in 0..at.data().len() {
            let mut p = at.clone();
            p.data_mut()[idx] += h;
            let mut m = at.clone();
            m.data_mut()[idx] -= h;
            numeric.data_mut()[idx] = (f(&p) - f(&m)) / (2.0 * h);
        }
        let floor = 1e-3 * numeric.max_abs();
        analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| rel_err(a, n, floor))
            .fold(0.0, f64::max)
    }

    fn check_all(
        x: &AttentionInputs,
        r: &RouterOutput,
        a: &MixRatio,
        fault: Option<Fault>,
    ) -> [f64; 4] {
        let g = random(16, 4, 99);
        let (_, saved) = sla2_forward_blockwise(x, r, a, &ForwardOptions::default()).unwrap();
        let grads = sla2_backward(x, &saved, a, &g, &BackwardOptions { fault }).unwrap();
        let with = |q: &Mat, k: &Mat, v: &Mat| {
            AttentionInputs::new(q.clone(), k.clone(), v.clone(), x.bq, x.bk).unwrap()
        };
        let eq = check_matrix(&grads.dq, |q| loss(&with(q, &x.k, &x.v), r, a, &g), &x.q);
        let ek = check_matrix(&grads.dk, |k| loss(&with(&x.q, k, &x.v), r, a, &g), &x.k);
        let ev = check_matrix(&grads.dv, |v| loss(&with(&x.q, &x.k, v), r, a, &g), &x.v);
        let rho = Mat::new(a.len(), 1, a.rho.clone()).unwrap();
        let d_rho = Mat::new(a.len(), 1, grads.d_rho.clone()).unwrap();
        let er = check_matrix(
            &d_rho,
            |p| loss(x, r, &MixRatio::from_rho(p.data().to_vec()).unwrap(), &g),
            &rho,
        );
        [eq, ek, ev, er]
    }

    #[test]
    fn hard_routing_gradients_match_finite_differences() {
        let x = inputs(1);
        let r = RouterOutput::Hard(hard_topk(&random(4, 8, 7), 25.0).unwrap());
        let a = MixRatio::from_rho(random(4, 1, 8).into_data()).unwrap();
        for e in check_all(&x, &r, &a, None) {
            assert!(e <= 1e-5, "{e}");
        }
    }

    #[test]
    fn soft_routing_gradients_match_finite_differences() {
        let x = inputs(2);
        let pc = crate::numerics::row_softmax(&random(4, 8, 3).scale(3.0));
        let soft = soft_topk(&pc, 25.0, 0.1).unwrap();
        let r = RouterOutput::Soft(soft.clone());
        let a = MixRatio::from_rho(random(4, 1, 4).into_data()).unwrap();
        for e in check_all(&x, &r, &a, None) {
            assert!(e <= 1e-5, "{e}");
        }
        let g = random(16, 4, 99);
        let (_, saved) = sla2_forward_blockwise(&x, &r, &a, &ForwardOptions::default()).unwrap();
        let grads = sla2_backward(&x, &saved, &a, &g, &BackwardOptions::default()).unwrap();
        let ew = check_matrix(
            grads.d_weights.as_ref().unwrap(),
            |w| {
                let mut s = soft.clone();
                s.values = w.clone();
                loss(&x, &RouterOutput::Soft(s), &a, &g)
            },
            &soft.values,
        );
        assert!(ew <= 1e-5, "{ew}");
    }

    #[test]
    fn empty_linear_branch_has_no_mix_gradient() {
        let x = inputs(3);
        let r = RouterOutput::Hard(crate::router::BlockMask::all_ones(4, 8));
        let a = MixRatio::zeros(4);
        let (_, saved) = sla2_forward_blockwise(&x, &r, &a, &ForwardOptions::default()).unwrap();
        let grads = sla2_backward(
            &x,
            &saved,
            &a,
            &random(16, 4, 5),
            &BackwardOptions::default(),
        )
        .unwrap();
        assert!(grads.d_rho.iter().all(|&g| g == 0.0));
        for e in check_all(&x, &r, &a, None) {
            assert!(e <= 1e-5, "{e}");
        }
    }

    #[test]
    fn injected_dv_fault_is_detected() {
        let x = inputs(4);
        let r = RouterOutput::Hard(hard_topk(&random(4, 8, 9), 25.0).unwrap());
        let a = MixRatio::zeros(4);
        let [_, _, ev, _] = check_all(&x, &r, &a, Some(Fault::DvAssign));
        assert!(ev > 1e-2, "{ev}");
    }

    #[test]
    fn backward_ignores_quantization() {
        let x = inputs(5);
        let r = RouterOutput::Hard(hard_topk(&random(4, 8, 1), 50.0).unwrap());
        let a = MixRatio::zeros(4);
        let g = random(16, 4, 2);
        let opts = ForwardOptions::quantized(QuantConfig::int8());
        let (_, mut saved) = sla2_forward_blockwise(&x, &r, &a, &opts).unwrap();
        let quantized = sla2_backward(&x, &saved, &a, &g, &BackwardOptions::default()).unwrap();
        saved.quant = None;
        let plain = sla2_backward(&x, &saved, &a, &g, &BackwardOptions::default()).unwrap();
        assert_eq!(quantized.dq, plain.dq);
        assert_eq!(quantized.dk, plain.dk);
        assert_eq!(quantized.dv, plain.dv);
    }
}
