//! Drivers behind the subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rottrans_core::data::{synth_generate, Split, SynthSpec};
use rottrans_core::eval::RankingMetrics;
use rottrans_core::train::{embed_records, evaluate_model, EpochLog, ImageSet, Precision, TrainConfig, Trainer, Variant};
use rottrans_core::{Scalar, Tensor};

use crate::checkpoint::{self, Checkpoint};
use crate::config;
use crate::dataset;
use crate::error::{AppError, AppResult};
use crate::report::{self, ComparisonRow};

pub const CONFIG_FILE: &str = "config.cfg";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.rtrx";
pub const COMPARISON_FILE: &str = "comparison.csv";

fn create_dir(dir: &Path) -> AppResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

pub fn synth(out: &Path, spec: &SynthSpec) -> AppResult<usize> {
    let data = synth_generate(spec)?;
    create_dir(out)?;
    dataset::write_dataset(out, &data)?;
    Ok(data.images.len())
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub metrics: RankingMetrics,
    pub param_count: usize,
    pub analytic_param_count: usize,
    pub seconds: f64,
}

/// Trains on `data` and writes config, logs, metrics and checkpoint to `run_dir`.
pub fn train_on<F: Scalar>(
    cfg: &TrainConfig,
    data: &ImageSet<F>,
    run_dir: &Path,
    mut progress: impl FnMut(&EpochLog),
) -> AppResult<TrainOutcome> {
    create_dir(run_dir)?;
    let cfg_path = run_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, config::render(cfg)).map_err(|e| AppError::io(&cfg_path, e))?;
    let start = Instant::now();
    let mut trainer = Trainer::<F>::new(cfg, data)?;
    let param_count = trainer.model.param_count();
    let analytic_param_count =
        rottrans_core::model::RotTransModel::<F>::analytic_param_count(&cfg.model, trainer.model.num_ids)?;
    let mut logs = Vec::new();
    let result = trainer.run(data, |l| {
        progress(l);
        logs.push(l.clone());
    });
    // the loss log is kept even when a run aborts
    report::write_loss_log(&run_dir.join(LOSS_LOG_FILE), &logs)?;
    result?;
    report::write_eval_log(&run_dir.join(EVAL_LOG_FILE), &logs)?;
    let metrics = logs
        .last()
        .and_then(|l| l.metrics.clone())
        .ok_or_else(|| AppError::Data("run finished without an evaluation".into()))?;
    report::write_metrics(&run_dir.join(METRICS_FILE), &metrics)?;
    checkpoint::from_trainer(&trainer).save(&run_dir.join(CHECKPOINT_FILE))?;
    Ok(TrainOutcome {
        logs,
        metrics,
        param_count,
        analytic_param_count,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn train(
    cfg: &TrainConfig,
    data_dir: &Path,
    run_dir: &Path,
    progress: impl FnMut(&EpochLog),
) -> AppResult<TrainOutcome> {
    match cfg.precision {
        Precision::F32 => train_on(cfg, &dataset::load_image_set::<f32>(data_dir)?, run_dir, progress),
        Precision::F64 => train_on(cfg, &dataset::load_image_set::<f64>(data_dir)?, run_dir, progress),
    }
}

fn eval_with<F: Scalar>(ck: &Checkpoint, data_dir: &Path) -> AppResult<RankingMetrics> {
    let (cfg, _, model) = checkpoint::load_model::<F>(ck)?;
    let data = dataset::load_image_set::<F>(data_dir)?;
    Ok(evaluate_model(&model, &data, cfg.metric, cfg.max_rank, cfg.eval_batch)?)
}

/// Query/gallery metrics of a checkpoint, optionally after deleting its
/// rotated branches.
pub fn eval(checkpoint_path: &Path, data_dir: &Path, strip_rotated: bool) -> AppResult<RankingMetrics> {
    let mut ck = Checkpoint::load(checkpoint_path)?;
    if strip_rotated {
        ck.strip_rotated();
    }
    let (cfg, _) = ck.parse_config()?;
    match cfg.precision {
        Precision::F32 => eval_with::<f32>(&ck, data_dir),
        Precision::F64 => eval_with::<f64>(&ck, data_dir),
    }
}

fn dump_with<F: Scalar>(ck: &Checkpoint, data_dir: &Path, splits: &[Split], out: &Path) -> AppResult<usize> {
    let (cfg, _, model) = checkpoint::load_model::<F>(ck)?;
    let data = dataset::load_image_set::<F>(data_dir)?;
    let idx: Vec<usize> = (0..data.manifest.records.len())
        .filter(|&i| splits.contains(&data.manifest.records[i].split))
        .collect();
    let feats: Tensor<F> = if idx.is_empty() {
        Tensor::zeros([0, cfg.model.backbone.embed_dim])
    } else {
        embed_records(&model, &data, &idx, cfg.eval_batch)?
    };
    let ids: Vec<u32> = idx.iter().map(|&i| data.manifest.records[i].identity).collect();
    report::write_embeddings(out, &feats, &ids)?;
    Ok(ids.len())
}

/// Writes retrieval embeddings of the selected splits as CSV.
pub fn dump_embeddings(checkpoint_path: &Path, data_dir: &Path, splits: &[Split], out: &Path) -> AppResult<usize> {
    let ck = Checkpoint::load(checkpoint_path)?;
    let (cfg, _) = ck.parse_config()?;
    match cfg.precision {
        Precision::F32 => dump_with::<f32>(&ck, data_dir, splits, out),
        Precision::F64 => dump_with::<f64>(&ck, data_dir, splits, out),
    }
}

pub fn variant_dir(out: &Path, v: Variant, seed: u64) -> PathBuf {
    out.join(format!("{}_{}", v.letter(), v.name())).join(format!("seed{seed}"))
}

fn compare_on<F: Scalar>(
    base: &TrainConfig,
    data: &ImageSet<F>,
    out: &Path,
    seeds: &[u64],
    variants: &[Variant],
    progress: &mut dyn FnMut(&ComparisonRow),
) -> AppResult<Vec<ComparisonRow>> {
    create_dir(out)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for &v in variants {
            let mut cfg = v.apply(base);
            cfg.seed = seed;
            let o = train_on(&cfg, data, &variant_dir(out, v, seed), |_| {})?;
            let row = ComparisonRow {
                variant: v,
                seed,
                metrics: o.metrics,
                param_count: o.param_count,
                seconds: o.seconds,
            };
            progress(&row);
            rows.push(row);
            report::write_comparison(&out.join(COMPARISON_FILE), &rows)?;
        }
    }
    Ok(rows)
}

/// Trains every variant for every seed on one dataset and writes the table.
pub fn compare(
    base: &TrainConfig,
    data_dir: &Path,
    out: &Path,
    seeds: &[u64],
    variants: &[Variant],
    mut progress: impl FnMut(&ComparisonRow),
) -> AppResult<Vec<ComparisonRow>> {
    match base.precision {
        Precision::F32 => compare_on(base, &dataset::load_image_set::<f32>(data_dir)?, out, seeds, variants, &mut progress),
        Precision::F64 => compare_on(base, &dataset::load_image_set::<f64>(data_dir)?, out, seeds, variants, &mut progress),
    }
}
