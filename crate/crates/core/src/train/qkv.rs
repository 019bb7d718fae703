//! Per-head Q, K, V captured from the dense-attention model, and their
//! on-disk form (one RTEN1 stack per record plus a JSON index).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::rten::Tensor;

use super::diffusion::{gaussian, NoiseSchedule};
use super::model::{AttentionMode, ToyModel};
use super::step_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct QkvRecord {
    pub layer: usize,
    pub head: usize,
    pub timestep: usize,
    /// Index of the clean sequence the record came from.
    pub batch: usize,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QkvDataset {
    pub records: Vec<QkvRecord>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    layer: usize,
    head: usize,
    timestep: usize,
    batch: usize,
    file: String,
}

impl QkvDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one (layer, head).
    pub fn head(&self, layer: usize, head: usize) -> Vec<&QkvRecord> {
        self.records
            .iter()
            .filter(|r| r.layer == layer && r.head == head)
            .collect()
    }

    /// Writes `index.json` and one `[3, N, d]` tensor per record. Returns the
    /// written files.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut index = Vec::with_capacity(self.records.len());
        let mut files = Vec::with_capacity(self.records.len() + 1);
        for (i, r) in self.records.iter().enumerate() {
            let file = format!("qkv_{i:05}.rten");
            let path = dir.join(&file);
            Tensor::from_matrices(&[r.q.clone(), r.k.clone(), r.v.clone()])?.write(&path)?;
            files.push(path);
            index.push(IndexEntry {
                layer: r.layer,
                head: r.head,
                timestep: r.timestep,
                batch: r.batch,
                file,
            });
        }
        let index_path = dir.join("index.json");
        fs::write(&index_path, serde_json::to_string_pretty(&index)?)?;
        files.push(index_path);
        Ok(files)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        if !index_path.exists() {
            return Err(Error::Missing(index_path.display().to_string()));
        }
        let index: Vec<IndexEntry> = serde_json::from_str(&fs::read_to_string(index_path)?)?;
        let records = index
            .into_iter()
            .map(|e| {
                let mut mats = Tensor::read(dir.join(&e.file))?.to_matrices::<f64>()?;
                if mats.len() != 3 {
                    return Err(Error::Format(format!("{} is not a q/k/v stack", e.file)));
                }
                let v = mats.pop().unwrap();
                let k = mats.pop().unwrap();
                let q = mats.pop().unwrap();
                Ok(QkvRecord {
                    layer: e.layer,
                    head: e.head,
                    timestep: e.timestep,
                    batch: e.batch,
                    q,
                    k,
                    v,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

/// Runs the model with dense attention on every clean sequence noised to
/// every timestep and records each head's Q, K, V.
pub fn sample_qkv(
    model: &ToyModel,
    x0s: &[Mat],
    timesteps: &[usize],
    seed: u64,
) -> Result<QkvDataset> {
    let schedule = NoiseSchedule::cosine(model.config.diffusion_steps)?;
    let mut records = Vec::new();
    for (b, x0) in x0s.iter().enumerate() {
        let mut rng = step_rng(seed, b as u64);
        for &t in timesteps {
            if t > schedule.steps() {
                return Err(Error::Config(format!("timestep {t} beyond schedule")));
            }
            let eps = gaussian(x0.rows(), x0.cols(), &mut rng);
            let x_t = schedule.noisy(x0, &eps, t)?;
            let mut tape = Tape::new();
            let vars = model.leaves(&mut tape);
            let mut cb = |layer: usize, head: usize, q: &Mat, k: &Mat, v: &Mat| {
                records.push(QkvRecord {
                    layer,
                    head,
                    timestep: t,
                    batch: b,
                    q: q.clone(),
                    k: k.clone(),
                    v: v.clone(),
                })
            };
            model.forward(
                &mut tape,
                &vars,
                &x_t,
                t,
                &AttentionMode::Full,
                Some(&mut cb),
            )?;
        }
    }
    Ok(QkvDataset { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul;
    use crate::train::model::ModelConfig;

    fn tiny(layers: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            seq_len: 8,
            d_model: 4 * heads,
            heads,
            layers,
            bq: 4,
            bk: 4,
            diffusion_steps: 50,
        }
    }

    fn data(n: usize, d: usize, count: usize) -> Vec<Mat> {
        (0..count)
            .map(|i| Mat::from_fn(n, d, |r, c| ((r * d + c + i) as f64 * 0.37).sin()))
            .collect()
    }

    #[test]
    fn record_count() {
        let model = ToyModel::init(tiny(1, 1), 1).unwrap();
        let ds = sample_qkv(&model, &data(8, 4, 3), &[10, 40], 5).unwrap();
        assert_eq!(ds.len(), 6);
        let model = ToyModel::init(tiny(2, 2), 1).unwrap();
        assert_eq!(
            sample_qkv(&model, &data(8, 8, 3), &[10, 40], 5)
                .unwrap()
                .len(),
            24
        );
    }

    #[test]
    fn first_layer_query_matches_hand_forward() {
        let model = ToyModel::init(tiny(1, 1), 2).unwrap();
        let x0 = data(8, 4, 1);
        let ds = sample_qkv(&model, &x0, &[20], 9).unwrap();
        // rebuild the layer input by hand
        let schedule = NoiseSchedule::cosine(50).unwrap();
        let mut rng = step_rng(9, 0);
        let eps = gaussian(8, 4, &mut rng);
        let x_t = schedule.noisy(&x0[0], &eps, 20).unwrap();
        let p = &model.params;
        let pos = crate::train::diffusion::position_table(8, 4);
        let temb = matmul(
            &crate::train::diffusion::sinusoidal_row(20.0, 4),
            &p["time.w"],
            false,
        )
        .unwrap();
        let emb = matmul(&x_t, &p["embed.w"], false).unwrap();
        let h = Mat::from_fn(8, 4, |r, c| {
            emb.get(r, c)
                + p["embed.b"].get(0, c)
                + pos.get(r, c)
                + temb.get(0, c)
                + p["time.b"].get(0, c)
        });
        let ln = Mat::from_fn(8, 4, |r, c| {
            let row = h.row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            (row[c] - mean) / (var + 1e-5).sqrt() * p["layer0.ln1.g"].get(0, c)
                + p["layer0.ln1.b"].get(0, c)
        });
        let q = matmul(&ln, &p["layer0.attn.wq"], false).unwrap();
        assert!(q.max_abs_diff(&ds.records[0].q) <= 1e-12);
    }

    #[test]
    fn dumps_round_trip_and_are_deterministic() {
        let model = ToyModel::init(tiny(1, 2), 3).unwrap();
        let ds = sample_qkv(&model, &data(8, 8, 2), &[5, 25], 1).unwrap();
        let again = sample_qkv(&model, &data(8, 8, 2), &[5, 25], 1).unwrap();
        assert_eq!(ds, again);
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = QkvDataset::read_dir(dir.path()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.records.iter().zip(&ds.records) {
            assert!(a
                .q
                .data()
                .iter()
                .zip(b.q.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
