//! End-to-end runs driven by a [`RunConfig`]: training to a checkpoint
//! directory, evaluating checkpoints, writing prediction directories and
//! cross-validating over a scheme's folds.
//!
//! A training run writes into `output_dir`:
//! `config.toml` (the resolved configuration), `train_log.jsonl` (a header
//! line with the config digest, then one record per step) and `checkpoint/`.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{DatasetManifest, FoldSplit, FoldTable, QueryMode, SplitScheme};
use crate::error::{FusionerError, Result};
use crate::eval::{cross_validate, evaluate_model, CrossValidation, EvalReport};
use crate::export::{write_prediction, PredictionMeta};
use crate::model::FusionerModel;
use crate::training::checkpoint::{encoder_digest, load_checkpoint, save_checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::training::{predict_prepared, prepare_samples, text_table, train, PreparedSample, TrainSummary};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CONFIG_COPY: &str = "config.toml";

/// First line of every training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub config_digest: String,
    pub trainable_params: usize,
    pub samples: usize,
}

pub struct TrainRun {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub config_digest: String,
    pub summary: TrainSummary,
    pub split: FoldSplit,
    pub model: FusionerModel,
    /// Encoder state captured before training, for integrity checks.
    pub encoder_state_before: Vec<u8>,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FusionerError::io(dir, e))
}

/// Loads the training manifest, resolves the split and encodes every sample
/// with a seen category.
pub fn prepare_training(cfg: &RunConfig, model: &FusionerModel) -> Result<(FoldSplit, Vec<PreparedSample>)> {
    let manifest = DatasetManifest::load(&cfg.data.train_manifest)?;
    let split = cfg.fold_split(&manifest.category_universe)?;
    let samples = prepare_samples(
        model,
        &manifest,
        &split.train_categories,
        cfg.train.query,
        cfg.data.image_size,
    )?;
    if samples.is_empty() {
        return Err(FusionerError::invalid(format!(
            "{} has no image with a training category of {}",
            cfg.data.train_manifest.display(),
            split.descriptor()
        )));
    }
    Ok((split, samples))
}

/// Trains per `cfg` and writes the run directory.
pub fn run_training(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let digest = cfg.digest();
    let mut model = FusionerModel::new(cfg.model_spec(), cfg.seed)?;
    let before = model.encoder_state();
    let (split, samples) = prepare_training(cfg, &model)?;
    create_dir(&cfg.output_dir)?;
    let copy = cfg.output_dir.join(CONFIG_COPY);
    std::fs::write(&copy, cfg.to_toml()).map_err(|e| FusionerError::io(&copy, e))?;

    let log_path = cfg.output_dir.join(TRAIN_LOG);
    let file = std::fs::File::create(&log_path).map_err(|e| FusionerError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let header = LogHeader {
        config_digest: digest.clone(),
        trainable_params: model.trainable_count(),
        samples: samples.len(),
    };
    writeln!(log, "{}", serde_json::to_string(&header).expect("serialisable"))
        .map_err(|e| FusionerError::io(&log_path, e))?;
    log::info!(
        "training {} samples, {} trainable parameters, config {}",
        samples.len(),
        model.trainable_count(),
        &digest[..12]
    );
    let summary = train(&mut model, &samples, &cfg.train, Some(&mut log))?;
    log.flush().map_err(|e| FusionerError::io(&log_path, e))?;

    let checkpoint = cfg.output_dir.join(CHECKPOINT_DIR);
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config_digest: digest.clone(),
        model: model.spec.clone(),
        train: cfg.train.clone(),
        split: Some(split.clone()),
        step: summary.steps,
        epoch: summary.epochs,
        lr: summary.final_lr,
        encoder_state_sha256: encoder_digest(&model),
        params: Vec::new(),
    };
    save_checkpoint(&checkpoint, &model, meta)?;
    Ok(TrainRun {
        checkpoint,
        log: log_path,
        config_digest: digest,
        summary,
        split,
        model,
        encoder_state_before: before,
    })
}

/// The split a checkpoint is evaluated under: its own, or `scheme` with the
/// manifest's categories as the unseen set. Refuses any split whose test
/// vocabulary overlaps the checkpoint's training vocabulary.
pub fn evaluation_split(
    meta: &CheckpointMeta,
    manifest: &DatasetManifest,
    scheme: Option<(SplitScheme, usize)>,
) -> Result<FoldSplit> {
    let split = match scheme {
        None => meta
            .split
            .clone()
            .ok_or_else(|| FusionerError::invalid("checkpoint records no split; pass one explicitly"))?,
        Some((scheme @ (SplitScheme::Custom | SplitScheme::Fss1000), fold)) => FoldSplit {
            scheme,
            fold,
            train_categories: meta.train_categories().to_vec(),
            test_categories: manifest.category_universe.clone(),
        },
        Some((scheme, fold)) => crate::data::build_fold_split(scheme, fold)?,
    };
    if let Some(c) = split
        .test_categories
        .iter()
        .find(|c| meta.train_categories().contains(c))
    {
        return Err(FusionerError::invalid(format!(
            "category `{c}` was seen while training this checkpoint; refusing to evaluate it as unseen ({})",
            split.descriptor()
        )));
    }
    split.check_disjoint()?;
    Ok(split)
}

/// Evaluation inputs: unseen-category samples of `manifest` under `split`.
pub fn prepare_evaluation(
    model: &FusionerModel,
    manifest: &DatasetManifest,
    split: &FoldSplit,
    image_size: Option<usize>,
) -> Result<Vec<PreparedSample>> {
    let samples = prepare_samples(
        model,
        manifest,
        &split.test_categories,
        QueryMode::PresentOnly,
        image_size,
    )?;
    if samples.is_empty() {
        return Err(FusionerError::invalid(format!(
            "no image in the manifest contains a test category of {}",
            split.descriptor()
        )));
    }
    Ok(samples)
}

/// Loads a checkpoint and scores it on `manifest_path`.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    manifest_path: &Path,
    scheme: Option<(SplitScheme, usize)>,
    image_size: Option<usize>,
    with_fb_iou: bool,
    predictions_out: Option<&Path>,
) -> Result<EvalReport> {
    let (meta, model) = load_checkpoint(checkpoint)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let split = evaluation_split(&meta, &manifest, scheme)?;
    let samples = prepare_evaluation(&model, &manifest, &split, image_size)?;
    if let Some(dir) = predictions_out {
        export_predictions(&model, &samples, dir, &meta.config_digest)?;
    }
    evaluate_model(&model, &samples, &split, &meta.config_digest, with_fb_iou)
}

/// Writes one prediction per sample into `dir`.
pub fn export_predictions(
    model: &FusionerModel,
    samples: &[PreparedSample],
    dir: &Path,
    digest: &str,
) -> Result<Vec<PredictionMeta>> {
    let table = text_table(model, samples)?;
    samples
        .iter()
        .map(|s| {
            let pred = predict_prepared(model, s, &table)?;
            write_prediction(
                dir,
                &s.id,
                &s.categories,
                &pred,
                model.spec.decoder.temperature,
                model.spec.decoder.threshold,
                digest,
            )
        })
        .collect()
}

/// Trains and evaluates every fold of the configured scheme. Fold `i`
/// trains into `output_dir/fold{i}` and is scored on the test manifest.
pub fn cross_validate_run(cfg: &RunConfig, with_fb_iou: bool) -> Result<CrossValidation> {
    let table = FoldTable::for_scheme(cfg.split.scheme)?;
    let test_path = cfg
        .data
        .test_manifest
        .clone()
        .ok_or_else(|| FusionerError::config("data.test_manifest", "cross-validation needs a test manifest"))?;
    let test = DatasetManifest::load(&test_path)?;
    cross_validate(&table, |split| {
        let mut fold_cfg = cfg.clone();
        fold_cfg.split.fold = split.fold;
        fold_cfg.output_dir = cfg.output_dir.join(format!("fold{}", split.fold));
        let run = run_training(&fold_cfg)?;
        let samples = prepare_evaluation(&run.model, &test, split, cfg.data.image_size)?;
        evaluate_model(&run.model, &samples, split, &run.config_digest, with_fb_iou)
    })
}
