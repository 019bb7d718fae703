//! The six workflow commands. Each writes into a fresh run directory named
//! `<command>-<hash12>` under the output root, built in a scratch directory
//! and renamed into place only when complete.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::accounting::{flops_sla2, render_table, Calibration};
use crate::attention::AttentionInputs;
use crate::bench::run_bench;
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::rten::Tensor;
use crate::train::diffusion::{synthetic_sequences, NoiseSchedule};
use crate::train::model::{AttentionMode, ToyModel};
use crate::train::qkv::{sample_qkv, QkvDataset};
use crate::train::stage1::{stage1_loss, stage1_train, AttentionSample, HeadRouting};
use crate::train::stage2::{prepare_model, sparse_mode, stage2_train};
use crate::train::trainer::{TrainSettings, Trainer, ValidationSet};
use crate::verify::{run_all, VerifyReport};

use super::checkpoint::{load_routers, load_state, save_routers, save_state};
use super::config::{RunConfig, Stream};
use super::manifest::Manifest;
use super::write_loss_csv;

/// Where a command wrote, what it recorded, and a human-readable summary.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub summary: String,
}

pub fn run_dir(out: &Path, command: &str, hash: &str) -> PathBuf {
    out.join(format!("{command}-{}", &hash[..12]))
}

fn data_dir(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    Ok(match &cfg.paths.data {
        Some(p) => p.clone(),
        None => run_dir(out, "gen-data", &cfg.data_hash()?),
    })
}

fn stage1_dir(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    Ok(match &cfg.paths.stage1 {
        Some(p) => p.clone(),
        None => run_dir(out, "stage1", &cfg.stage1_hash()?),
    })
}

struct Produced {
    inputs: BTreeMap<String, String>,
    metrics: BTreeMap<String, f64>,
    summary: String,
}

/// Builds the run in `<dir>.partial`, writes its manifest, then swaps it in.
fn produce(
    out: &Path,
    command: &str,
    hash: &str,
    build: impl FnOnce(&Path) -> Result<Produced>,
) -> Result<RunOutput> {
    let dir = run_dir(out, command, hash);
    let scratch = out.join(format!(".{command}-{}.partial", &hash[..12]));
    if scratch.exists() {
        fs::remove_dir_all(&scratch)?;
    }
    fs::create_dir_all(&scratch)?;
    let result = build(&scratch).and_then(|p| {
        let manifest = Manifest::build(&scratch, command, hash, p.inputs, p.metrics)?;
        manifest.write(&scratch)?;
        Ok((manifest, p.summary))
    });
    match result {
        Ok((manifest, summary)) => {
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            fs::rename(&scratch, &dir)?;
            Ok(RunOutput {
                dir,
                manifest,
                summary,
            })
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&scratch);
            Err(e)
        }
    }
}

fn write_stack(path: &Path, mats: &[Mat]) -> Result<()> {
    Tensor::from_matrices(mats)?.write(path)
}

fn read_stack(path: &Path) -> Result<Vec<Mat>> {
    if !path.exists() {
        return Err(Error::Missing(path.display().to_string()));
    }
    Tensor::read(path)?.to_matrices()
}

/// Synthetic clean sequences, a dense-attention model pretrained on them,
/// and the per-head Q, K, V it produces.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let hash = cfg.data_hash()?;
    produce(out, "gen-data", &hash, |dir| {
        let m = &cfg.model;
        let train = synthetic_sequences(
            &cfg.data.signal,
            cfg.data.train_sequences,
            m.seq_len,
            m.d_model,
            cfg.seed_for(Stream::TrainData),
        )?;
        let val = synthetic_sequences(
            &cfg.data.signal,
            cfg.data.val_sequences,
            m.seq_len,
            m.d_model,
            cfg.seed_for(Stream::ValData),
        )?;
        fs::create_dir_all(dir.join("data"))?;
        write_stack(&dir.join("data/train.rten"), &train)?;
        write_stack(&dir.join("data/val.rten"), &val)?;

        let model = ToyModel::init(m.clone(), cfg.seed_for(Stream::Init))?;
        let settings = TrainSettings {
            steps: cfg.pretrain.steps,
            batch: cfg.pretrain.batch,
            lr: cfg.pretrain.lr,
            seed: cfg.seed_for(Stream::Pretrain),
        };
        let mut trainer = Trainer::new(model, AttentionMode::Full, &train, &settings)?;
        let losses = trainer.run(settings.steps)?;
        save_state(&dir.join("base"), &trainer.state)?;
        write_loss_csv(&dir.join("pretrain_loss.csv"), &losses)?;

        let qkv = sample_qkv(
            &trainer.state.model,
            &train[..cfg.qkv.sequences],
            &cfg.qkv.timesteps,
            cfg.seed_for(Stream::Qkv),
        )?;
        qkv.write_dir(&dir.join("qkv"))?;

        let mut metrics = BTreeMap::new();
        metrics.insert("qkv_records".into(), qkv.len() as f64);
        metrics.insert("pretrain_steps".into(), losses.len() as f64);
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            metrics.insert("pretrain_first_loss".into(), *first);
            metrics.insert("pretrain_last_loss".into(), *last);
        }
        let summary = format!(
            "{} training / {} validation sequences, {} pretraining steps, {} Q/K/V records",
            train.len(),
            val.len(),
            losses.len(),
            qkv.len()
        );
        Ok(Produced {
            inputs: BTreeMap::new(),
            metrics,
            summary,
        })
    })
}

/// Trains one router and mixing-ratio pair per (layer, head, k%) on the
/// captured Q, K, V.
pub fn cmd_stage1(cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let data = data_dir(cfg, out)?;
    let upstream = Manifest::require(&data, "gen-data")?;
    let hash = cfg.stage1_hash()?;
    produce(out, "stage1", &hash, |dir| {
        let dataset = QkvDataset::read_dir(&data.join("qkv"))?;
        let (bq, bk) = (cfg.model.bq, cfg.model.bk);
        let s1 = cfg.stage1_config();
        let results = stage1_train(&dataset, bq, bk, &s1)?;
        save_routers(dir, &results)?;
        fs::create_dir_all(dir.join("curves"))?;
        let mut metrics = BTreeMap::new();
        let mut summary = String::new();
        let _ = writeln!(
            summary,
            "{:>5} {:>4} {:>6}  {:>12} {:>12}  {:>12} {:>12}",
            "layer", "head", "k%", "soft before", "soft after", "hard ident.", "hard learned"
        );
        for r in &results {
            let stem = format!("layer{}_head{}_k{}", r.layer, r.head, r.k_percent);
            write_loss_csv(&dir.join(format!("curves/{stem}.csv")), &r.losses)?;
            let samples: Vec<AttentionSample> = dataset
                .head(r.layer, r.head)
                .into_iter()
                .map(|rec| {
                    AttentionSample::new(AttentionInputs::new(
                        rec.q.clone(),
                        rec.k.clone(),
                        rec.v.clone(),
                        bq,
                        bk,
                    )?)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&AttentionSample> = samples.iter().collect();
            let identity =
                HeadRouting::identity(r.routing.router.dim(), cfg.model.query_blocks(), s1.tau);
            let hard_identity = stage1_loss(&refs, &identity, r.k_percent, false)?;
            let hard_learned = stage1_loss(&refs, &r.routing, r.k_percent, false)?;
            metrics.insert(format!("{stem}.soft_initial"), r.initial_loss);
            metrics.insert(format!("{stem}.soft_final"), r.final_loss);
            metrics.insert(format!("{stem}.hard_identity"), hard_identity);
            metrics.insert(format!("{stem}.hard_learned"), hard_learned);
            let _ = writeln!(
                summary,
                "{:>5} {:>4} {:>6}  {:>12.5e} {:>12.5e}  {:>12.5e} {:>12.5e}",
                r.layer,
                r.head,
                r.k_percent,
                r.initial_loss,
                r.final_loss,
                hard_identity,
                hard_learned
            );
        }
        let mut inputs = BTreeMap::new();
        inputs.insert("gen-data".into(), upstream.digest()?);
        Ok(Produced {
            inputs,
            metrics,
            summary,
        })
    })
}

/// Fine-tunes the pretrained model with sparse + linear attention through the
/// frozen stage-1 routers at the configured sparsity.
pub fn cmd_stage2(cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let s1_dir = stage1_dir(cfg, out)?;
    let s1_manifest = Manifest::require(&s1_dir, "stage1")?;
    let data = data_dir(cfg, out)?;
    let data_manifest = Manifest::require(&data, "gen-data")?;
    let s2 = cfg.stage2_config();
    let k = s2.k_percent();
    let routers = load_routers(&s1_dir)?;
    if !routers.iter().any(|r| (r.k_percent - k).abs() < 1e-9) {
        return Err(Error::Missing(format!(
            "stage-1 routers for k={k}% (sparsity {}%) in {}",
            s2.sparsity,
            s1_dir.display()
        )));
    }
    let hash = cfg.stage2_hash()?;
    produce(out, "stage2", &hash, |dir| {
        let base = load_state(&data.join("base"))?.model;
        let train = read_stack(&data.join("data/train.rten"))?;
        let val = read_stack(&data.join("data/val.rten"))?;
        let model = prepare_model(&base, &routers, k)?;
        let schedule = NoiseSchedule::cosine(cfg.model.diffusion_steps)?;
        let validation = ValidationSet::build(
            &schedule,
            &val,
            &cfg.stage2.val_timesteps,
            cfg.seed_for(Stream::Validation),
        )?;
        let plain = sparse_mode(k, s2.tau, false);
        let quantized = sparse_mode(k, s2.tau, true);
        let before = validation.loss(&model, &plain)?;
        let dense_base = validation.loss(&base, &AttentionMode::Full)?;
        let (state, losses) = stage2_train(model, &train, &s2)?;
        save_state(&dir.join("checkpoint"), &state)?;
        write_loss_csv(&dir.join("stage2_loss.csv"), &losses)?;
        let after = validation.loss(&state.model, &plain)?;
        let after_q = validation.loss(&state.model, &quantized)?;

        let mut metrics = BTreeMap::new();
        metrics.insert("sparsity".into(), s2.sparsity);
        metrics.insert("qat".into(), f64::from(u8::from(s2.qat)));
        metrics.insert("steps".into(), losses.len() as f64);
        metrics.insert("val_loss_dense_base".into(), dense_base);
        metrics.insert("val_loss_before".into(), before);
        metrics.insert("val_loss".into(), after);
        metrics.insert("val_loss_quantized".into(), after_q);
        let summary = format!(
            "sparsity {}% ({} QAT), {} steps\nvalidation loss: dense base {dense_base:.6}, sparse before {before:.6}, after {after:.6}, after with quantized forward {after_q:.6}",
            s2.sparsity,
            if s2.qat { "with" } else { "without" },
            losses.len()
        );
        let mut inputs = BTreeMap::new();
        inputs.insert("gen-data".into(), data_manifest.digest()?);
        inputs.insert("stage1".into(), s1_manifest.digest()?);
        Ok(Produced {
            inputs,
            metrics,
            summary,
        })
    })
}

/// Runs every verification suite. The returned report says whether all
/// checks passed; the run directory is written either way.
pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<(RunOutput, VerifyReport)> {
    cfg.validate()?;
    let hash = cfg.verify_hash()?;
    let report = run_all(&cfg.verify, cfg.seed)?;
    let text = report.render_text();
    let output = produce(out, "verify", &hash, |dir| {
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        fs::write(dir.join("report.txt"), &text)?;
        let mut metrics = BTreeMap::new();
        metrics.insert("checks".into(), report.checks.len() as f64);
        metrics.insert("failed".into(), report.failures().count() as f64);
        Ok(Produced {
            inputs: BTreeMap::new(),
            metrics,
            summary: text.clone(),
        })
    })?;
    Ok((output, report))
}

/// Times dense attention against the sparse + linear forward. Timings vary
/// between runs; everything else in the report is fixed by the config.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let hash = cfg.bench_hash()?;
    let report = run_bench(&cfg.bench, cfg.seed)?;
    let text = report.render_text();
    produce(out, "bench", &hash, |dir| {
        fs::write(
            dir.join("bench.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        fs::write(dir.join("bench.txt"), &text)?;
        let mut metrics = BTreeMap::new();
        metrics.insert("dense_median_seconds".into(), report.dense_median_seconds);
        for r in &report.rows {
            metrics.insert(format!("speedup_at_{}", r.sparsity_percent), r.speedup);
        }
        Ok(Produced {
            inputs: BTreeMap::new(),
            metrics,
            summary: text.clone(),
        })
    })
}

/// Collects the manifests of every run under the output root together with
/// the operation counts of the 1.3B video geometry.
pub fn cmd_report(cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let mut runs = Vec::new();
    if out.exists() {
        let mut dirs: Vec<PathBuf> = fs::read_dir(out)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        dirs.sort();
        for d in dirs {
            let name = d
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            if d.is_dir() && !name.starts_with('.') && !name.starts_with("report-") {
                if let Ok(m) = Manifest::read(&d) {
                    runs.push((name, m));
                }
            }
        }
    }
    let cal = Calibration::load()?;
    let flops = [0.90, 0.95, 0.97]
        .iter()
        .map(|&s| flops_sla2(&cal.geometry, s, cal.bq, cal.bk))
        .collect::<Result<Vec<_>>>()?;
    let mut digests = BTreeMap::new();
    for (name, m) in &runs {
        digests.insert(name.clone(), m.digest()?);
    }
    let hash = super::sha256_hex(serde_json::to_string(&digests)?.as_bytes());
    produce(out, "report", &hash, |dir| {
        let mut text = String::new();
        for (name, m) in &runs {
            let _ = writeln!(text, "[{name}] {} files", m.files.len());
            for (k, v) in &m.metrics {
                let _ = writeln!(text, "  {k} = {v}");
            }
        }
        let _ = writeln!(
            text,
            "\noperation counts, N={} d={}:",
            cal.geometry.n, cal.geometry.d
        );
        text.push_str(&render_table(&flops));
        let json = serde_json::json!({
            "runs": runs.iter().map(|(n, m)| serde_json::json!({"dir": n, "manifest": m})).collect::<Vec<_>>(),
            "flops": flops,
        });
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&json)?,
        )?;
        fs::write(dir.join("report.txt"), &text)?;
        Ok(Produced {
            inputs: digests.clone(),
            metrics: BTreeMap::new(),
            summary: text,
        })
    })
}
