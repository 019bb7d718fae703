//! Frozen reference instances: inputs, block mask, mixing logits and the
//! dense-reference outputs, one RTEN1 file each, indexed by `golden.json`.
//!
//! The expected tensors are produced once by [`GoldenInstance::generate`]
//! from the dense path and committed; later builds compare against the files
//! rather than against a fresh computation.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{sla2_naive_parts, AttentionInputs, ForwardOptions, MixRatio};
use crate::autodiff::hard_routing;
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::numerics::Mat;
use crate::router::{BlockMask, RouterOutput, RouterParams};
use crate::rten::{read_matrix, write_matrix};
use crate::train::diffusion::gaussian;

pub const INDEX_FILE: &str = "golden.json";

const TENSORS: [&str; 8] = ["q", "k", "v", "mask", "rho", "o_s", "o_l", "output"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenIndex {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub bq: usize,
    pub bk: usize,
    pub k_percent: f64,
    pub smooth_k: bool,
    /// Which routine produced the expected tensors.
    pub generator: String,
    /// `name -> sha256` of each `<name>.rten`.
    pub sha256: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct GoldenInstance {
    pub inputs: AttentionInputs,
    pub mask: BlockMask,
    pub alpha: MixRatio,
    pub o_s: Mat,
    pub o_l: Mat,
    pub output: Mat,
    pub index: GoldenIndex,
}

impl GoldenInstance {
    /// Random Gaussian Q/K/V and logits, identity-router hard Top-k mask,
    /// outputs from the dense reference with K smoothing on.
    pub fn generate(
        seed: u64,
        n: usize,
        d: usize,
        bq: usize,
        bk: usize,
        k_percent: f64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = AttentionInputs::new(
            gaussian(n, d, &mut rng),
            gaussian(n, d, &mut rng),
            gaussian(n, d, &mut rng),
            bq,
            bk,
        )?;
        let alpha = MixRatio::from_rho(gaussian(inputs.tm(), 1, &mut rng).into_data())?;
        let routing = hard_routing(&inputs, &RouterParams::identity(d, 0.1), k_percent)?;
        let parts = sla2_naive_parts(&inputs, &routing, &alpha, &ForwardOptions::default())?;
        let mask = routing.as_hard().cloned().expect("hard routing");
        Ok(Self {
            inputs,
            mask,
            alpha,
            o_s: parts.o_s,
            o_l: parts.o_l,
            output: parts.output,
            index: GoldenIndex {
                seed,
                n,
                d,
                bq,
                bk,
                k_percent,
                smooth_k: true,
                generator: "sla2_naive_parts".into(),
                sha256: Default::default(),
            },
        })
    }

    pub fn routing(&self) -> RouterOutput {
        RouterOutput::Hard(self.mask.clone())
    }

    fn tensors(&self) -> [(&'static str, Mat); 8] {
        let rho = Mat::from_fn(self.alpha.len(), 1, |i, _| self.alpha.rho[i]);
        [
            ("q", self.inputs.q.clone()),
            ("k", self.inputs.k.clone()),
            ("v", self.inputs.v.clone()),
            ("mask", self.mask.to_matrix()),
            ("rho", rho),
            ("o_s", self.o_s.clone()),
            ("o_l", self.o_l.clone()),
            ("output", self.output.clone()),
        ]
    }

    /// Writes every tensor and the index, filling in the checksums.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.index.sha256.clear();
        for (name, m) in self.tensors() {
            let path = dir.join(format!("{name}.rten"));
            write_matrix(&path, &m)?;
            self.index
                .sha256
                .insert(name.into(), sha256_hex(&fs::read(&path)?));
        }
        fs::write(
            dir.join(INDEX_FILE),
            serde_json::to_string_pretty(&self.index)? + "\n",
        )?;
        Ok(())
    }

    /// Reads an instance back, refusing files whose checksum changed.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        if !path.exists() {
            return Err(Error::Missing(path.display().to_string()));
        }
        let index: GoldenIndex = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let mut get = |name: &str| -> Result<Mat> {
            let file = dir.join(format!("{name}.rten"));
            let want = index
                .sha256
                .get(name)
                .ok_or_else(|| Error::Missing(format!("checksum for {name}")))?;
            if &sha256_hex(&fs::read(&file)?) != want {
                return Err(Error::Consistency(format!(
                    "checksum mismatch for {}",
                    file.display()
                )));
            }
            read_matrix(&file)
        };
        let [q, k, v, mask, rho, o_s, o_l, output] = TENSORS.map(&mut get);
        let inputs = AttentionInputs::new(q?, k?, v?, index.bq, index.bk)?;
        let mask = mask?;
        let bits = mask.data().iter().map(|&b| b != 0.0).collect();
        let mask = BlockMask::from_bits(mask.rows(), mask.cols(), bits)?;
        let alpha = MixRatio::from_rho(rho?.into_data())?;
        Ok(Self {
            inputs,
            mask,
            alpha,
            o_s: o_s?,
            o_l: o_l?,
            output: output?,
            index,
        })
    }
}
