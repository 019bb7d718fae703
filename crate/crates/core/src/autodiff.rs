//! A small reverse-mode tape over dense matrices.
//!
//! Nodes are appended in evaluation order, so walking them backwards is a
//! reverse topological order. Besides the usual layer primitives the tape
//! knows two attention operators: dense softmax attention and the α-mixed
//! sparse + linear operator with a frozen router and hard Top-k routing.

use crate::attention::{
    full_attention, full_attention_backward, sla2_backward, sla2_forward_blockwise,
    AttentionInputs, BackwardOptions, ForwardOptions, MixRatio, Sla2Saved,
};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, matmul, Mat};
use crate::quant::{smooth_k, QuantConfig};
use crate::router::{block_scores, hard_topk, RouterOutput, RouterParams};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Routing and mixing setup of one α-mixed attention head.
#[derive(Debug, Clone)]
pub struct SlaHead<'a> {
    pub router: &'a RouterParams,
    pub k_percent: f64,
    pub bq: usize,
    pub bk: usize,
    pub quant: Option<QuantConfig>,
}

struct SlaCtx {
    inputs: AttentionInputs,
    saved: Sla2Saved,
    alpha: MixRatio,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    FullAttention(usize, usize, usize),
    Sla2 {
        q: usize,
        k: usize,
        v: usize,
        rho: usize,
        ctx: Box<SlaCtx>,
    },
    MseTo(usize, Mat),
    Sum(usize),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was unused.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(like.rows(), like.cols()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, value: Mat, op: Op) -> Result<Var> {
        if !value.is_finite() {
            let (index, value) = value
                .data()
                .iter()
                .enumerate()
                .find(|(_, x)| !x.is_finite())
                .map(|(i, &x)| (i, x))
                .unwrap();
            return Err(Error::NonFinite { index, value });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b), false)?;
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a.0, b.0))
    }

    /// Adds a 1×c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(row));
        if b.rows() != 1 || b.cols() != x.cols() {
            return shape_err(format!(
                "row {:?} broadcast onto {:?}",
                b.shape(),
                x.shape()
            ));
        }
        let v = Mat::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) + b.get(0, c));
        self.push(v, Op::AddRow(a.0, row.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a.0, s))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| {
            let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        self.push(v, Op::Gelu(a.0))
    }

    /// Per-row layer normalization with 1×c gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let c = xv.cols();
        if g.shape() != (1, c) || b.shape() != (1, c) {
            return shape_err(format!(
                "layer norm over {c} columns with gain {:?}, bias {:?}",
                g.shape(),
                b.shape()
            ));
        }
        let mut xhat = Mat::zeros(xv.rows(), c);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = Mat::from_fn(xv.rows(), c, |r, j| {
            xhat.get(r, j) * g.get(0, j) + b.get(0, j)
        });
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() {
            return shape_err(format!("columns {start}..{} of {}", start + len, x.cols()));
        }
        let v = x.col_block(start, len);
        self.push(v, Op::SliceCols(a.0, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return shape_err("concatenated parts differ in row count");
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    /// Dense `softmax(q kᵀ/√d) v`.
    pub fn full_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let out = full_attention(self.value(q), self.value(k), self.value(v))?;
        self.push(out, Op::FullAttention(q.0, k.0, v.0))
    }

    /// α-mixed sparse + linear attention. The mask comes from the frozen
    /// router with hard Top-k and receives no gradient; `rho` is a tm×1
    /// column of mixing logits.
    pub fn sla2(&mut self, q: Var, k: Var, v: Var, rho: Var, head: &SlaHead) -> Result<Var> {
        let inputs = AttentionInputs::new(
            self.value(q).clone(),
            self.value(k).clone(),
            self.value(v).clone(),
            head.bq,
            head.bk,
        )?;
        let alpha = MixRatio::from_rho(self.value(rho).data().to_vec())?;
        let routing = hard_routing(&inputs, head.router, head.k_percent)?;
        let opts = ForwardOptions {
            smooth_k: true,
            quant: head.quant,
        };
        let (out, saved) = sla2_forward_blockwise(&inputs, &routing, &alpha, &opts)?;
        self.push(
            out,
            Op::Sla2 {
                q: q.0,
                k: k.0,
                v: v.0,
                rho: rho.0,
                ctx: Box::new(SlaCtx {
                    inputs,
                    saved,
                    alpha,
                }),
            },
        )
    }

    /// Mean squared difference to a constant target, as a 1×1 node.
    pub fn mse_to(&mut self, a: Var, target: &Mat) -> Result<Var> {
        let x = self.value(a);
        x.expect_same_shape(target)?;
        let n = x.data().len() as f64;
        let s: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.push(Mat::filled(1, 1, s / n), Op::MseTo(a.0, target.clone()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Mat::filled(1, 1, s), Op::Sum(a.0))
    }

    /// Reverse sweep from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return shape_err("backward needs a scalar (1x1) node");
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = matmul(&g, &self.nodes[*b].value, true)?;
                    let db = matmul(&self.nodes[*a].value.transpose(), &g, false)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::AddRow(a, row) => {
                    let mut db = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &x) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *a, g)?;
                    accumulate(&mut grads, *row, db)?;
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(&self.nodes[*b].value)?;
                    let db = g.hadamard(&self.nodes[*a].value)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::Gelu(a) => {
                    let dx = self.nodes[*a].value.zip_map(&g, |x, gy| {
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })?;
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = &self.nodes[*gain].value;
                    let c = g.cols();
                    let mut dx = Mat::zeros(g.rows(), c);
                    let mut dgain = Mat::zeros(1, c);
                    let mut dbias = Mat::zeros(1, c);
                    for r in 0..g.rows() {
                        let gy = g.row(r);
                        let xh = xhat.row(r);
                        let dxhat: Vec<f64> =
                            gy.iter().zip(gv.row(0)).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, xh);
                        let scale = inv_std[r] / c as f64;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = scale * (c as f64 * dxhat[j] - s1 - xh[j] * s2);
                        }
                        for j in 0..c {
                            dgain.row_mut(0)[j] += gy[j] * xh[j];
                            dbias.row_mut(0)[j] += gy[j];
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gain, dgain)?;
                    accumulate(&mut grads, *bias, dbias)?;
                }
                Op::SliceCols(a, start) => {
                    let src = &self.nodes[*a].value;
                    let mut da = Mat::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        accumulate(&mut grads, p, g.col_block(off, w))?;
                        off += w;
                    }
                }
                Op::FullAttention(q, k, v) => {
                    let fg = full_attention_backward(
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                        &g,
                    )?;
                    accumulate(&mut grads, *q, fg.dq)?;
                    accumulate(&mut grads, *k, fg.dk)?;
                    accumulate(&mut grads, *v, fg.dv)?;
                }
                Op::Sla2 { q, k, v, rho, ctx } => {
                    let sg = sla2_backward(
                        &ctx.inputs,
                        &ctx.saved,
                        &ctx.alpha,
                        &g,
                        &BackwardOptions::default(),
                    )?;
                    accumulate(&mut grads, *q, sg.dq)?;
                    accumulate(&mut grads, *k, sg.dk)?;
                    accumulate(&mut grads, *v, sg.dv)?;
                    let d_rho = Mat::new(sg.d_rho.len(), 1, sg.d_rho)?;
                    accumulate(&mut grads, *rho, d_rho)?;
                }
                Op::MseTo(a, target) => {
                    let x = &self.nodes[*a].value;
                    let s = 2.0 * g.get(0, 0) / x.data().len() as f64;
                    let dx = x.zip_map(target, |a, b| s * (a - b))?;
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::Sum(a) => {
                    let x = &self.nodes[*a].value;
                    accumulate(&mut grads, *a, Mat::filled(x.rows(), x.cols(), g.get(0, 0)))?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: usize, g: Mat) -> Result<()> {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Hard Top-k routing from the router's pooled scores on smoothed keys.
pub fn hard_routing(
    inputs: &AttentionInputs,
    router: &RouterParams,
    k_percent: f64,
) -> Result<RouterOutput> {
    let k_smooth = smooth_k(&inputs.k).0;
    let pc = block_scores(&inputs.q, &k_smooth, router, inputs.bq, inputs.bk)?;
    Ok(RouterOutput::Hard(hard_topk(&pc, k_percent)?))
}

/// Relative error used by every gradient check:
/// `|a − n| / max(|a|, |n|, floor)`, where `floor` is `1e-3` times the
/// largest numerical derivative of the same tensor.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic
        .abs()
        .max(numeric.abs())
        .max(floor)
        .max(f64::MIN_POSITIVE)
}

/// Central differences of `f` at `leaves`, compared with `analytic`
/// coordinate by coordinate. Returns the worst relative error per leaf.
pub fn finite_diff_errors(
    leaves: &[Mat],
    analytic: &[Mat],
    eps: f64,
    mut f: impl FnMut(&[Mat]) -> Result<f64>,
) -> Result<Vec<f64>> {
    if leaves.len() != analytic.len() {
        return shape_err("one analytic gradient per leaf");
    }
    let mut work = leaves.to_vec();
    let mut worst = Vec::with_capacity(leaves.len());
    for (li, leaf) in leaves.iter().enumerate() {
        leaf.expect_same_shape(&analytic[li])?;
        let mut numeric = Vec::with_capacity(leaf.data().len());
        for idx in 0..leaf.data().len() {
            let x0 = leaf.data()[idx];
            work[li].data_mut()[idx] = x0 + eps;
            let up = f(&work)?;
            work[li].data_mut()[idx] = x0 - eps;
            let down = f(&work)?;
            work[li].data_mut()[idx] = x0;
            numeric.push((up - down) / (2.0 * eps));
        }
        let floor = 1e-3 * numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst.push(
            analytic[li]
                .data()
                .iter()
                .zip(&numeric)
                .map(|(&a, &n)| relative_error(a, n, floor))
                .fold(0.0, f64::max),
        );
    }
    Ok(worst)
}

/// Builds `f` on a fresh tape, differentiates it, and checks every leaf
/// against central differences. Returns the worst relative error.
pub fn finite_diff_check(
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    leaves: &[Mat],
    eps: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Mat> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, l)| grads.get_or_zeros(v, l))
        .collect();
    let errs = finite_diff_errors(leaves, &analytic, eps, |xs| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|l| t.leaf(l.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.scalar(o))
    })?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn quadratic_is_exact() {
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[random(3, 4, 1)],
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let w = random(4, 4, 9);
        let cases: Vec<(
            &str,
            Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
            Vec<Mat>,
        )> = vec![
            (
                "matmul",
                Box::new(|t, v| {
                    let m = t.matmul(v[0], v[1])?;
                    let m2 = t.mul(m, m)?;
                    t.sum(m2)
                }),
                vec![random(3, 4, 1), random(4, 2, 2)],
            ),
            (
                "add_row+gelu",
                Box::new(|t, v| {
                    let a = t.add_row(v[0], v[1])?;
                    let g = t.gelu(a)?;
                    let s = t.scale(g, 1.7)?;
                    t.sum(s)
                }),
                vec![random(3, 4, 3).scale(2.0), random(1, 4, 4)],
            ),
            (
                "layer_norm",
                Box::new(move |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2])?;
                    let wv = t.leaf(w.clone());
                    let p = t.matmul(y, wv)?;
                    t.mse_to(p, &Mat::filled(3, 4, 0.3))
                }),
                vec![random(3, 4, 5), random(1, 4, 6), random(1, 4, 7)],
            ),
            (
                "slice+concat",
                Box::new(|t, v| {
                    let a = t.slice_cols(v[0], 1, 2)?;
                    let b = t.slice_cols(v[0], 0, 1)?;
                    let c = t.concat_cols(&[a, b, a])?;
                    let c2 = t.mul(c, c)?;
                    t.sum(c2)
                }),
                vec![random(3, 4, 8)],
            ),
            (
                "add",
                Box::new(|t, v| {
                    let a = t.add(v[0], v[1])?;
                    let b = t.mul(a, v[0])?;
                    t.sum(b)
                }),
                vec![random(2, 3, 10), random(2, 3, 11)],
            ),
            (
                "full_attention",
                Box::new(|t, v| {
                    let o = t.full_attention(v[0], v[1], v[2])?;
                    t.mse_to(o, &Mat::filled(8, 4, 0.1))
                }),
                vec![random(8, 4, 12), random(8, 4, 13), random(8, 4, 14)],
            ),
        ];
        for (name, f, leaves) in cases {
            let err = finite_diff_check(f, &leaves, 1e-5).unwrap();
            assert!(err <= 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn sla2_node_matches_finite_differences() {
        let router = RouterParams::identity(4, 0.1);
        let head = SlaHead {
            router: &router,
            k_percent: 25.0,
            bq: 4,
            bk: 4,
            quant: None,
        };
        // well-separated pooled scores keep the mask fixed under perturbation
        let q = Mat::from_fn(16, 4, |r, c| if c == r / 4 { 2.0 } else { 0.0 })
            .add(&random(16, 4, 1).scale(0.05))
            .unwrap();
        let k = Mat::from_fn(16, 4, |r, c| if c == (r / 4 + 1) % 4 { 2.0 } else { 0.0 })
            .add(&random(16, 4, 2).scale(0.05))
            .unwrap();
        let v = random(16, 4, 3);
        let rho = random(4, 1, 4);
        let target = random(16, 4, 5);
        let err = finite_diff_check(
            |t, l| {
                let o = t.sla2(l[0], l[1], l[2], l[3], &head)?;
                t.mse_to(o, &target)
            },
            &[q, k, v, rho],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::filled(1, 1, 3.0));
        let a = t.add(x, x).unwrap();
        let b = t.mul(a, x).unwrap();
        let g = t.backward(b).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 12.0);
    }
}
