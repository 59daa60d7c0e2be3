//! Loss, optimisation loop and checkpoints. Encoders stay frozen: only the
//! projector, fusion and decoder parameters in the model's [`ParamSet`] are
//! updated.

pub mod checkpoint;
pub mod optim;
pub mod schedule;

use std::io::Write;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Mat, Tape};
use crate::data::{load_sample, query_vocabulary, DatasetManifest, QueryMode};
use crate::error::{FusionerError, Result};
use crate::model::{Ablation, FusionerModel};
use crate::params::ParamSet;
pub use optim::{AdamW, AdamWConfig};
pub use schedule::lr_at;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ablation: Ablation,
    /// How training images are queried: all present seen categories, or one
    /// sampled per step.
    #[serde(default = "default_query")]
    pub query: QueryMode,
}

fn default_query() -> QueryMode {
    QueryMode::PresentOnly
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            warmup_epochs: 10,
            total_epochs: 50,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            seed: 0,
            ablation: Ablation::Full,
            query: default_query(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(FusionerError::config("train.base_lr", "must be positive"));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(FusionerError::config(
                "train.warmup_epochs",
                format!("exceeds total_epochs ({})", self.total_epochs),
            ));
        }
        if self.total_epochs == 0 {
            return Err(FusionerError::config("train.total_epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(FusionerError::config("train.batch_size", "must be positive"));
        }
        if matches!(self.query, QueryMode::FixedK { .. }) {
            return Err(FusionerError::config("train.query", "fixed_k is an evaluation mode"));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over all pixels and categories, in the stable
/// form `softplus(x) − x·y`.
pub fn segmentation_loss(logits: &Array3<f64>, gt: &Array3<bool>) -> Result<f64> {
    if logits.dim() != gt.dim() {
        return Err(FusionerError::dim(format!(
            "logits {:?} vs ground truth {:?}",
            logits.dim(),
            gt.dim()
        )));
    }
    if logits.is_empty() {
        return Err(FusionerError::dim("empty logits"));
    }
    let sum: f64 = logits
        .iter()
        .zip(gt)
        .map(|(&x, &y)| softplus(x) - if y { x } else { 0.0 })
        .sum();
    Ok(sum / logits.len() as f64)
}

/// A sample with its frozen visual tokens computed once.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub tokens: Mat,
    pub grid: (usize, usize),
    pub size: (usize, usize),
    /// Queried categories, in channel order of `masks`.
    pub categories: Vec<String>,
    pub masks: Array3<bool>,
}

impl PreparedSample {
    /// Target matrix `(H·W) × C` for the given channel subset.
    pub fn target(&self, channels: &[usize]) -> Mat {
        let (h, w) = self.size;
        Mat::from_shape_fn((h * w, channels.len()), |(p, k)| {
            self.masks[[p / w, p % w, channels[k]]] as u8 as f64
        })
    }
}

/// Loads and encodes every manifest entry that has at least one category in
/// `allowed`, queried per `mode`. Entries without any are skipped and logged.
pub fn prepare_samples(
    model: &FusionerModel,
    manifest: &DatasetManifest,
    allowed: &[String],
    mode: QueryMode,
    image_size: Option<usize>,
) -> Result<Vec<PreparedSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut jobs = Vec::new();
    for entry in &manifest.entries {
        match query_vocabulary(&entry.categories, allowed, mode, &mut rng) {
            Ok(q) => jobs.push((entry, q)),
            Err(e) => log::info!("skipping {}: {e}", entry.id()),
        }
    }
    jobs.par_iter()
        .map(|(entry, queried)| {
            let sample = load_sample(manifest, entry, queried, image_size)?;
            let tokens = model.visual.encode_image(&sample.image)?;
            Ok(PreparedSample {
                id: sample.id,
                tokens: tokens.tokens().clone(),
                grid: tokens.grid(),
                size: (sample.image.height(), sample.image.width()),
                categories: sample.categories,
                masks: sample.masks,
            })
        })
        .collect()
}

/// Text rows for `categories`, looked up in a precomputed table.
fn text_rows(table: &[(String, Vec<f64>)], categories: &[&String]) -> Mat {
    let d = table.first().map_or(0, |(_, v)| v.len());
    let mut m = Mat::zeros((categories.len(), d));
    for (i, c) in categories.iter().enumerate() {
        let (_, v) = table.iter().find(|(n, _)| n == *c).expect("category in text table");
        m.row_mut(i).assign(&ndarray::ArrayView1::from(v));
    }
    m
}

/// Loss and parameter gradients for one sample and a channel subset.
pub fn sample_gradients(
    model: &FusionerModel,
    sample: &PreparedSample,
    text: &Mat,
    channels: &[usize],
) -> Result<(f64, ParamSet)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let logits = model.forward(&mut tape, &bound, &sample.tokens, sample.grid, text, sample.size)?;
    let loss = tape.bce_with_logits(logits, sample.target(channels));
    let value = tape.value(loss)[[0, 0]];
    let mut grads = tape.backward(loss);
    let mut out = ParamSet::new();
    for (name, var) in bound.iter() {
        let g = grads
            .take(*var)
            .unwrap_or_else(|| Mat::zeros(model.params.get(name).expect("bound parameter").dim()));
        out.insert(name.clone(), g);
    }
    Ok((value, out))
}

/// One optimisation step on a batch. Per-sample gradients are computed in
/// parallel and reduced in batch order, so the result does not depend on the
/// thread count.
pub fn train_step(
    model: &mut FusionerModel,
    batch: &[(&PreparedSample, Vec<usize>)],
    text_table: &[(String, Vec<f64>)],
    opt: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    let results: Vec<Result<(f64, ParamSet)>> = batch
        .par_iter()
        .map(|(sample, channels)| {
            let names: Vec<&String> = channels.iter().map(|&c| &sample.categories[c]).collect();
            sample_gradients(model, sample, &text_rows(text_table, &names), channels)
        })
        .collect();
    let mut total = model.params.zeros_like();
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for r in results {
        let (l, g) = r?;
        loss += l * scale;
        total.add_scaled(&g, scale);
    }
    if !loss.is_finite() || !total.all_finite() {
        let ids: Vec<&str> = batch.iter().map(|(s, _)| s.id.as_str()).collect();
        let norms: Vec<String> = model
            .params
            .norms()
            .into_iter()
            .map(|(n, v)| format!("{n}={v:.4e}"))
            .collect();
        return Err(FusionerError::Numerical(format!(
            "non-finite loss {loss} on samples [{}]; parameter norms: {}",
            ids.join(", "),
            norms.join(", ")
        )));
    }
    if !model.params.is_empty() {
        opt.step(&mut model.params, &total, lr);
    }
    Ok(loss)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub final_loss: f64,
    pub final_lr: f64,
}

/// Precomputes ensembled text embeddings for every category in `samples`.
pub fn text_table(model: &FusionerModel, samples: &[PreparedSample]) -> Result<Vec<(String, Vec<f64>)>> {
    let mut names: Vec<String> = samples.iter().flat_map(|s| s.categories.iter().cloned()).collect();
    names.sort();
    names.dedup();
    names
        .par_iter()
        .map(|n| Ok((n.clone(), model.text.ensemble_prompts(n, &model.templates)?)))
        .collect()
}

/// Runs the full schedule. Every step is appended to `log` as one JSON line.
pub fn train(
    model: &mut FusionerModel,
    samples: &[PreparedSample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(FusionerError::invalid("no training samples"));
    }
    let table = text_table(model, samples)?;
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    let mut last = (f64::NAN, 0.0);
    for epoch in 0..cfg.total_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&PreparedSample, Vec<usize>)> = chunk
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    let channels = match cfg.query {
                        QueryMode::SampleOne => vec![rng.random_range(0..s.categories.len())],
                        _ => (0..s.categories.len()).collect(),
                    };
                    (s, channels)
                })
                .collect();
            let lr = lr_at(step, steps_per_epoch, cfg);
            let loss = train_step(model, &batch, &table, &mut opt, lr)?;
            if let Some(w) = log.as_deref_mut() {
                let rec = LogRecord { step, epoch, lr, loss };
                writeln!(w, "{}", serde_json::to_string(&rec).expect("serialisable"))
                    .map_err(|e| FusionerError::io("<training log>", e))?;
            }
            last = (loss, lr);
            step += 1;
        }
        log::debug!("epoch {epoch}: loss {:.5}", last.0);
    }
    Ok(TrainSummary {
        steps: step,
        epochs: cfg.total_epochs,
        steps_per_epoch,
        final_loss: last.0,
        final_lr: last.1,
    })
}

/// Predictions for a prepared sample, with masks in its channel order.
pub fn predict_prepared(
    model: &FusionerModel,
    sample: &PreparedSample,
    table: &[(String, Vec<f64>)],
) -> Result<crate::decoder::MaskPrediction> {
    let names: Vec<&String> = sample.categories.iter().collect();
    let text = text_rows(table, &names);
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let logits = model.forward(&mut tape, &bound, &sample.tokens, sample.grid, &text, sample.size)?;
    let (h, w) = sample.size;
    crate::decoder::MaskPrediction::from_logits(tape.value(logits), h, w, model.spec.decoder.threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn perfect_and_neutral_losses() {
        let gt = Array3::from_shape_fn((2, 2, 1), |(y, x, _)| (y + x) % 2 == 0);
        let perfect = gt.mapv(|g| if g { 100.0 } else { -100.0 });
        assert!(segmentation_loss(&perfect, &gt).unwrap() < 1e-40);
        let zero = Array3::zeros((2, 2, 1));
        assert!((segmentation_loss(&zero, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(segmentation_loss(&zero, &Array3::from_elem((2, 1, 2), true)).is_err());
    }
}
