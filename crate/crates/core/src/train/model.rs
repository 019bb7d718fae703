//! A small pre-LN diffusion transformer whose attention can run dense or
//! through the α-mixed sparse + linear operator.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SlaHead, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::quant::QuantConfig;
use crate::router::RouterParams;

use super::diffusion::{gaussian, position_table, sinusoidal_row};

/// Named parameter tensors, iterated in name order.
pub type ParamSet = BTreeMap<String, Mat>;

/// Tape handles for a [`ParamSet`].
pub type VarMap = BTreeMap<String, Var>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Tokens per sequence (N).
    pub seq_len: usize,
    /// Width of the residual stream; also the data feature count.
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub bq: usize,
    pub bk: usize,
    /// Diffusion timesteps T.
    pub diffusion_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 256,
            d_model: 64,
            heads: 2,
            layers: 2,
            bq: 16,
            bk: 8,
            diffusion_steps: 1000,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn query_blocks(&self) -> usize {
        self.seq_len / self.bq
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.seq_len == 0 || self.d_model == 0 || self.heads == 0 || self.layers == 0 {
            return bad("model dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if !self.d_model.is_multiple_of(2) {
            return bad("d_model must be even for sinusoidal embeddings");
        }
        if self.bq == 0
            || self.bk == 0
            || !self.seq_len.is_multiple_of(self.bq)
            || !self.seq_len.is_multiple_of(self.bk)
        {
            return bad("seq_len must be divisible by bq and bk");
        }
        if self.diffusion_steps == 0 {
            return bad("diffusion_steps must be positive");
        }
        Ok(())
    }
}

/// How each attention head is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionMode {
    Full,
    /// Hard Top-k routing through the stored (frozen) router of each head,
    /// mixing logits read from the parameters.
    Sparse {
        k_percent: f64,
        tau: f64,
        quant: Option<QuantConfig>,
    },
}

pub fn rho_name(layer: usize, head: usize) -> String {
    format!("layer{layer}.head{head}.rho")
}

pub fn router_names(layer: usize, head: usize) -> (String, String) {
    (
        format!("layer{layer}.head{head}.router.proj_q"),
        format!("layer{layer}.head{head}.router.proj_k"),
    )
}

/// Router projections never receive updates in fine-tuning.
pub fn is_router_param(name: &str) -> bool {
    name.contains(".router.")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl ToyModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut params = ParamSet::new();
        let mut dense =
            |params: &mut ParamSet, name: String, rows: usize, cols: usize, gain: f64| {
                let w = gaussian(rows, cols, &mut rng).scale(gain / (rows as f64).sqrt());
                params.insert(name, w);
            };
        dense(&mut params, "embed.w".into(), d, d, 1.0);
        dense(&mut params, "time.w".into(), d, d, 1.0);
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                dense(&mut params, format!("layer{l}.attn.{w}"), d, d, 1.0);
            }
            dense(&mut params, format!("layer{l}.mlp.w1"), d, 2 * d, 1.0);
            dense(&mut params, format!("layer{l}.mlp.w2"), 2 * d, d, 1.0);
        }
        dense(&mut params, "head.w".into(), d, d, 0.02);
        let row = |v: f64| Mat::filled(1, d, v);
        params.insert("embed.b".into(), row(0.0));
        params.insert("time.b".into(), row(0.0));
        for l in 0..config.layers {
            params.insert(format!("layer{l}.attn.bo"), row(0.0));
            params.insert(format!("layer{l}.mlp.b1"), Mat::zeros(1, 2 * d));
            params.insert(format!("layer{l}.mlp.b2"), row(0.0));
            for ln in ["ln1", "ln2"] {
                params.insert(format!("layer{l}.{ln}.g"), row(1.0));
                params.insert(format!("layer{l}.{ln}.b"), row(0.0));
            }
        }
        params.insert("final.g".into(), row(1.0));
        params.insert("final.b".into(), row(0.0));
        params.insert("head.b".into(), row(0.0));
        Ok(Self { config, params })
    }

    /// Adds a router and mixing logits to every head.
    /// `heads[layer][head]` supplies the pair.
    pub fn install_routing(&mut self, heads: &[Vec<(RouterParams, Vec<f64>)>]) -> Result<()> {
        if heads.len() != self.config.layers || heads.iter().any(|h| h.len() != self.config.heads) {
            return Err(Error::Config(
                "routing must cover every layer and head".into(),
            ));
        }
        let tm = self.config.query_blocks();
        for (l, layer) in heads.iter().enumerate() {
            for (h, (router, rho)) in layer.iter().enumerate() {
                if router.dim() != self.config.head_dim() || rho.len() != tm {
                    return Err(Error::Config(format!(
                        "routing for layer {l} head {h} does not fit the model"
                    )));
                }
                let (nq, nk) = router_names(l, h);
                self.params.insert(nq, router.proj_q.clone());
                self.params.insert(nk, router.proj_k.clone());
                self.params
                    .insert(rho_name(l, h), Mat::new(tm, 1, rho.clone())?);
            }
        }
        Ok(())
    }

    pub fn has_routing(&self) -> bool {
        self.params.contains_key(&rho_name(0, 0))
    }

    pub fn router(&self, layer: usize, head: usize, tau: f64) -> Result<RouterParams> {
        let (nq, nk) = router_names(layer, head);
        let get = |n: &str| {
            self.params
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Missing(format!("parameter {n}")))
        };
        RouterParams::new(get(&nq)?, get(&nk)?, tau)
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn leaves(&self, tape: &mut Tape) -> VarMap {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect()
    }

    /// Predicted noise for `x_t` at timestep `t`. `capture` sees the per-head
    /// q, k, v of every layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &VarMap,
        x_t: &Mat,
        t: usize,
        mode: &AttentionMode,
        mut capture: Option<&mut dyn FnMut(usize, usize, &Mat, &Mat, &Mat)>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if x_t.shape() != (cfg.seq_len, cfg.d_model) {
            return Err(Error::Shape(format!(
                "input {:?}, model expects ({}, {})",
                x_t.shape(),
                cfg.seq_len,
                cfg.d_model
            )));
        }
        let p = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::Missing(format!("parameter {name}")))
        };
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let x = tape.leaf(x_t.clone());
        let mut h = tape.matmul(x, p("embed.w")?)?;
        h = tape.add_row(h, p("embed.b")?)?;
        let pos = tape.leaf(position_table(cfg.seq_len, d));
        h = tape.add(h, pos)?;
        let temb = tape.leaf(sinusoidal_row(t as f64, d));
        let temb = tape.matmul(temb, p("time.w")?)?;
        let temb = tape.add(temb, p("time.b")?)?;
        h = tape.add_row(h, temb)?;

        let routers: Vec<Vec<RouterParams>> = match mode {
            AttentionMode::Full => Vec::new(),
            AttentionMode::Sparse { tau, .. } => (0..cfg.layers)
                .map(|l| (0..cfg.heads).map(|hh| self.router(l, hh, *tau)).collect())
                .collect::<Result<_>>()?,
        };

        for l in 0..cfg.layers {
            let a = tape.layer_norm(
                h,
                p(&format!("layer{l}.ln1.g"))?,
                p(&format!("layer{l}.ln1.b"))?,
            )?;
            let q = tape.matmul(a, p(&format!("layer{l}.attn.wq"))?)?;
            let k = tape.matmul(a, p(&format!("layer{l}.attn.wk"))?)?;
            let v = tape.matmul(a, p(&format!("layer{l}.attn.wv"))?)?;
            let mut outs = Vec::with_capacity(cfg.heads);
            for hh in 0..cfg.heads {
                let qh = tape.slice_cols(q, hh * hd, hd)?;
                let kh = tape.slice_cols(k, hh * hd, hd)?;
                let vh = tape.slice_cols(v, hh * hd, hd)?;
                if let Some(cb) = capture.as_mut() {
                    cb(l, hh, tape.value(qh), tape.value(kh), tape.value(vh));
                }
                let o = match mode {
                    AttentionMode::Full => tape.full_attention(qh, kh, vh)?,
                    AttentionMode::Sparse {
                        k_percent, quant, ..
                    } => {
                        let head = SlaHead {
                            router: &routers[l][hh],
                            k_percent: *k_percent,
                            bq: cfg.bq,
                            bk: cfg.bk,
                            quant: *quant,
                        };
                        tape.sla2(qh, kh, vh, p(&rho_name(l, hh))?, &head)?
                    }
                };
                outs.push(o);
            }
            let cat = tape.concat_cols(&outs)?;
            let proj = tape.matmul(cat, p(&format!("layer{l}.attn.wo"))?)?;
            let proj = tape.add_row(proj, p(&format!("layer{l}.attn.bo"))?)?;
            h = tape.add(h, proj)?;
            let m = tape.layer_norm(
                h,
                p(&format!("layer{l}.ln2.g"))?,
                p(&format!("layer{l}.ln2.b"))?,
            )?;
            let m = tape.matmul(m, p(&format!("layer{l}.mlp.w1"))?)?;
            let m = tape.add_row(m, p(&format!("layer{l}.mlp.b1"))?)?;
            let m = tape.gelu(m)?;
            let m = tape.matmul(m, p(&format!("layer{l}.mlp.w2"))?)?;
            let m = tape.add_row(m, p(&format!("layer{l}.mlp.b2"))?)?;
            h = tape.add(h, m)?;
        }
        let f = tape.layer_norm(h, p("final.g")?, p("final.b")?)?;
        let out = tape.matmul(f, p("head.w")?)?;
        tape.add_row(out, p("head.b")?)
    }

    /// Forward without keeping gradients around.
    pub fn predict(&self, x_t: &Mat, t: usize, mode: &AttentionMode) -> Result<Mat> {
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape);
        let out = self.forward(&mut tape, &vars, x_t, t, mode, None)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_errors;

    fn tiny() -> ModelConfig {
        ModelConfig {
            seq_len: 16,
            d_model: 8,
            heads: 2,
            layers: 1,
            bq: 4,
            bk: 4,
            diffusion_steps: 100,
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut c = tiny();
        c.heads = 3;
        assert!(ToyModel::init(c, 1).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut model = ToyModel::init(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // unit-gain output head so inner gradients sit well above rounding noise
        model.params.insert(
            "head.w".into(),
            gaussian(8, 8, &mut rng).scale(8f64.sqrt().recip()),
        );
        let x = gaussian(16, 8, &mut rng);
        let target = gaussian(16, 8, &mut rng);
        let names = [
            "layer0.attn.wq",
            "layer0.mlp.w1",
            "head.w",
            "layer0.ln1.g",
            "time.w",
        ];
        let loss_of = |m: &ToyModel| -> Result<(f64, Vec<Mat>)> {
            let mut tape = Tape::new();
            let vars = m.leaves(&mut tape);
            let out = m.forward(&mut tape, &vars, &x, 17, &AttentionMode::Full, None)?;
            let l = tape.mse_to(out, &target)?;
            let g = tape.backward(l)?;
            Ok((
                tape.scalar(l),
                names
                    .iter()
                    .map(|n| g.get_or_zeros(vars[*n], &m.params[*n]))
                    .collect(),
            ))
        };
        let (_, analytic) = loss_of(&model).unwrap();
        let leaves: Vec<Mat> = names.iter().map(|n| model.params[*n].clone()).collect();
        let errs = finite_diff_errors(&leaves, &analytic, 1e-4, |xs| {
            let mut m = model.clone();
            for (n, x) in names.iter().zip(xs) {
                m.params.insert(n.to_string(), x.clone());
            }
            Ok(loss_of(&m)?.0)
        })
        .unwrap();
        for (n, e) in names.iter().zip(errs) {
            assert!(e <= 1e-6, "{n}: {e}");
        }
    }

    #[test]
    fn capture_sees_projected_heads() {
        let model = ToyModel::init(tiny(), 4).unwrap();
        let x = Mat::filled(16, 8, 0.1);
        let mut seen = Vec::new();
        let mut tape = Tape::new();
        let vars = model.leaves(&mut tape);
        let mut cb = |l: usize, h: usize, q: &Mat, _k: &Mat, _v: &Mat| seen.push((l, h, q.shape()));
        model
            .forward(&mut tape, &vars, &x, 3, &AttentionMode::Full, Some(&mut cb))
            .unwrap();
        assert_eq!(seen, vec![(0, 0, (16, 4)), (0, 1, (16, 4))]);
    }
}
