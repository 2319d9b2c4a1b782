//! Pipeline stages: tokenizer, pre-training, finetuning and probing, each
//! writing its artifacts into an output directory.

use std::fs;
use std::path::Path;

use splitmask_core::data::{Image, LabeledDataset};
use splitmask_core::model::ModelParams;
use splitmask_core::tokenizer::{build_kmeans, build_random_patches, build_random_projection, VocabKind, Vocabulary};
use splitmask_core::train::{finetune, pretrain, probe, FinetuneReport, PretrainConfig, PretrainSummary, ProbeResult};

use crate::config::{RunConfig, RunMode};
use crate::error::{data_err, Error, Result};
use crate::formats::{load_checkpoint_for, load_vocabulary, save_checkpoint, save_vocabulary, CheckpointMeta};
use crate::metrics::{write_eval, write_history, write_probe, EvalRow, RunLog};

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn resized(images: &[Image], size: usize) -> Vec<Image> {
    images
        .iter()
        .map(|im| if im.height() == size && im.width() == size { im.clone() } else { im.resize(size, size) })
        .collect()
}

/// Loads the configured vocabulary file or fits one on `train`.
pub fn tokenizer(cfg: &RunConfig, train: &LabeledDataset) -> Result<Vocabulary> {
    let spec = &cfg.tokenizer;
    let m = &cfg.model;
    let vocab = if let Some(path) = &spec.path {
        load_vocabulary(path)?
    } else {
        let images = resized(train.images(), m.image_size);
        match spec.kind {
            VocabKind::RandomProjection => build_random_projection(m.vocab_size, m.patch_dim(), spec.seed),
            VocabKind::RandomPatches => build_random_patches(&images, m.vocab_size, m.patch_size, spec.seed, spec.norm),
            VocabKind::Kmeans => build_kmeans(&images, m.vocab_size, m.patch_size, &spec.kmeans, spec.seed, spec.norm),
        }
        .map_err(data_err)?
    };
    if vocab.size() != m.vocab_size || vocab.dim() != m.patch_dim() {
        return Err(Error::Config(format!(
            "vocabulary is {}×{}, model expects {}×{}",
            vocab.size(),
            vocab.dim(),
            m.vocab_size,
            m.patch_dim()
        )));
    }
    Ok(vocab)
}

/// Epoch count after the budget rule.
pub fn pretrain_epochs(cfg: &RunConfig, train_len: usize) -> Result<usize> {
    Ok(cfg.budget.epochs(train_len)?.unwrap_or(cfg.pretrain.epochs))
}

pub struct PretrainOutcome {
    pub params: ModelParams<f32>,
    pub summary: PretrainSummary,
    pub epochs: usize,
}

/// Pre-trains from scratch. On a numerical abort the last good parameters
/// are saved as `diagnostic.smck` before the error is returned.
pub fn run_pretrain(cfg: &RunConfig, train: &LabeledDataset, out: &Path) -> Result<PretrainOutcome> {
    ensure_dir(out)?;
    let vocab = tokenizer(cfg, train)?;
    save_vocabulary(&out.join("vocab.pvoc"), &vocab)?;
    let epochs = pretrain_epochs(cfg, train.len())?;
    let pcfg = PretrainConfig {
        epochs,
        ..cfg.pretrain.clone()
    };
    let mut params = ModelParams::init(&cfg.model, None, cfg.seed)?;
    let mut log = RunLog::create(&out.join("metrics.csv"), cfg.log.wall_clock)?.with_checkpoints(out, cfg.seed);
    let result = pretrain(&mut params, train.images(), &vocab, &pcfg, &mut log);
    log.flush()?;
    match result {
        Ok(summary) => {
            let meta = CheckpointMeta::new(&params, summary.steps as u64, cfg.seed);
            save_checkpoint(&out.join("final.smck"), &meta, &params)?;
            Ok(PretrainOutcome { params, summary, epochs })
        }
        Err(e) if e.is_numerical() => {
            save_checkpoint(&out.join("diagnostic.smck"), &CheckpointMeta::new(&params, 0, cfg.seed), &params)?;
            Err(Error::Numerical(format!("{}; last good parameters saved to diagnostic.smck", e)))
        }
        Err(e) => Err(log.last_error.take().unwrap_or(Error::Core(e))),
    }
}

/// Weights from `cfg.checkpoint`, or a random initialization.
pub fn backbone(cfg: &RunConfig) -> Result<ModelParams<f32>> {
    match &cfg.checkpoint {
        Some(path) => Ok(load_checkpoint_for(path, &cfg.model)?.1),
        None => Ok(ModelParams::init(&cfg.model, None, cfg.seed)?),
    }
}

pub fn run_finetune(
    cfg: &RunConfig,
    backbone: &ModelParams<f32>,
    train: &LabeledDataset,
    test: &LabeledDataset,
    out: &Path,
) -> Result<FinetuneReport> {
    ensure_dir(out)?;
    let mut log = RunLog::create(&out.join("finetune_metrics.csv"), cfg.log.wall_clock)?;
    let result = finetune(backbone, train, test, &cfg.finetune, &mut log);
    log.flush()?;
    let (params, report) = result.map_err(|e| match e {
        splitmask_core::Error::Usage(m) => Error::Data(m),
        other => log.last_error.take().unwrap_or(Error::Core(other)),
    })?;
    write_history(&out.join("finetune_history.csv"), &report.history)?;
    let steps = report.history.len() as u64;
    save_checkpoint(&out.join("finetuned.smck"), &CheckpointMeta::new(&params, steps, cfg.seed), &params)?;
    Ok(report)
}

pub fn run_probe(
    cfg: &RunConfig,
    backbone: &ModelParams<f32>,
    train: &LabeledDataset,
    test: &LabeledDataset,
    out: &Path,
) -> Result<Vec<ProbeResult>> {
    ensure_dir(out)?;
    let results = probe(backbone, train, test, &cfg.probe).map_err(data_err)?;
    write_probe(&out.join("probe.csv"), &cfg.tag, cfg.seed, &results)?;
    Ok(results)
}

pub fn pretrain_rows(cfg: &RunConfig, o: &PretrainOutcome) -> Vec<EvalRow> {
    let s = &o.summary;
    let mut rows = vec![
        row(cfg, "pretrain_epochs", o.epochs as f64),
        row(cfg, "pretrain_steps", s.steps as f64),
        row(cfg, "pretrain_loss_total", s.final_epoch_total),
    ];
    rows.extend(s.final_epoch_mim.map(|v| row(cfg, "pretrain_loss_mim", v)));
    rows.extend(s.final_epoch_nce.map(|v| row(cfg, "pretrain_loss_nce", v)));
    rows
}

pub fn finetune_rows(cfg: &RunConfig, r: &FinetuneReport) -> Vec<EvalRow> {
    vec![row(cfg, "finetune_best_top1", r.best_accuracy), row(cfg, "finetune_final_top1", r.final_accuracy)]
}

pub fn probe_rows(cfg: &RunConfig, results: &[ProbeResult]) -> Vec<EvalRow> {
    results
        .iter()
        .map(|r| row(cfg, &format!("probe_layer_{}_top1", r.layer), r.test_accuracy))
        .collect()
}

fn row(cfg: &RunConfig, metric: &str, value: f64) -> EvalRow {
    EvalRow {
        tag: cfg.tag.clone(),
        seed: cfg.seed,
        metric: metric.to_string(),
        value,
    }
}

/// Runs `cfg.mode` into `out`: resolved config, logs, checkpoints and
/// `eval.csv`.
pub fn execute(cfg: &RunConfig, out: &Path) -> Result<Vec<EvalRow>> {
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let (train, test) = cfg.data.load()?;
    let rows = match cfg.mode {
        RunMode::Pretrain => pretrain_rows(cfg, &run_pretrain(cfg, &train, out)?),
        RunMode::Finetune => finetune_rows(cfg, &run_finetune(cfg, &backbone(cfg)?, &train, &test, out)?),
        RunMode::Probe => probe_rows(cfg, &run_probe(cfg, &backbone(cfg)?, &train, &test, out)?),
    };
    write_eval(&out.join("eval.csv"), &rows)?;
    Ok(rows)
}
