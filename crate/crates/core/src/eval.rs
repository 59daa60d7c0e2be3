//! Segmentation metrics and fold-wise evaluation.
//!
//! IoU is accumulated over the whole split (summed intersections over summed
//! unions) and only the queried category channels are scored; there is no
//! background class in mIoU. Classes whose union is zero over the split are
//! left out of the mean. FB-IoU averages foreground (union of all channels)
//! and background IoU, dropping a side whose union is zero.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{FoldSplit, FoldTable};
use crate::error::{FusionerError, Result};
use crate::model::FusionerModel;
use crate::training::{predict_prepared, text_table, PreparedSample};

/// Per-class and foreground/background pixel counters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IouCounters {
    classes: BTreeMap<String, (u64, u64)>,
    foreground: (u64, u64),
    background: (u64, u64),
}

impl IouCounters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one image. `pred` and `gt` are `H × W × C` with channel `c` for
    /// `categories[c]`.
    pub fn accumulate(&mut self, pred: ArrayView3<bool>, gt: ArrayView3<bool>, categories: &[String]) -> Result<()> {
        if pred.dim() != gt.dim() || pred.dim().2 != categories.len() {
            return Err(FusionerError::dim(format!(
                "prediction {:?}, ground truth {:?}, {} categories",
                pred.dim(),
                gt.dim(),
                categories.len()
            )));
        }
        for (c, name) in categories.iter().enumerate() {
            let (p, g) = (pred.index_axis(Axis(2), c), gt.index_axis(Axis(2), c));
            let (i, u) = count(p.iter().zip(g.iter()).map(|(&a, &b)| (a, b)));
            let e = self.classes.entry(name.clone()).or_default();
            e.0 += i;
            e.1 += u;
        }
        let fg_pred = pred.map_axis(Axis(2), |v| v.iter().any(|&x| x));
        let fg_gt = gt.map_axis(Axis(2), |v| v.iter().any(|&x| x));
        let pairs = || fg_pred.iter().zip(fg_gt.iter());
        let (i, u) = count(pairs().map(|(&a, &b)| (a, b)));
        self.foreground.0 += i;
        self.foreground.1 += u;
        let (i, u) = count(pairs().map(|(&a, &b)| (!a, !b)));
        self.background.0 += i;
        self.background.1 += u;
        Ok(())
    }

    pub fn merge(&mut self, other: &IouCounters) {
        for (k, (i, u)) in &other.classes {
            let e = self.classes.entry(k.clone()).or_default();
            e.0 += i;
            e.1 += u;
        }
        self.foreground.0 += other.foreground.0;
        self.foreground.1 += other.foreground.1;
        self.background.0 += other.background.0;
        self.background.1 += other.background.1;
    }

    /// IoU of every class with non-zero union.
    pub fn per_class_iou(&self) -> BTreeMap<String, f64> {
        self.classes
            .iter()
            .filter(|(_, (_, u))| *u > 0)
            .map(|(k, (i, u))| (k.clone(), *i as f64 / *u as f64))
            .collect()
    }

    /// Classes seen but excluded from the mean for having zero union.
    pub fn excluded_classes(&self) -> Vec<String> {
        self.classes
            .iter()
            .filter(|(_, (_, u))| *u == 0)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        miou(&self.per_class_iou().into_values().collect::<Vec<_>>())
    }

    pub fn fb_iou(&self) -> Result<f64> {
        let sides: Vec<f64> = [self.foreground, self.background]
            .into_iter()
            .filter(|(_, u)| *u > 0)
            .map(|(i, u)| i as f64 / u as f64)
            .collect();
        if sides.is_empty() {
            return Err(FusionerError::invalid("FB-IoU of an empty prediction set"));
        }
        Ok(sides.iter().sum::<f64>() / sides.len() as f64)
    }
}

fn count(pairs: impl Iterator<Item = (bool, bool)>) -> (u64, u64) {
    pairs.fold((0, 0), |(i, u), (a, b)| (i + (a && b) as u64, u + (a || b) as u64))
}

/// Arithmetic mean of per-class IoUs.
pub fn miou(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(FusionerError::invalid("mIoU over an empty class set"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// FB-IoU of a single prediction.
pub fn fb_iou(pred: ArrayView3<bool>, gt: ArrayView3<bool>) -> Result<f64> {
    let names: Vec<String> = (0..pred.dim().2).map(|c| c.to_string()).collect();
    let mut counters = IouCounters::new();
    counters.accumulate(pred, gt, &names)?;
    counters.fb_iou()
}

/// Reads an exported mask: 0 is background, 1 or 255 foreground, anything
/// else is rejected.
pub fn binary_mask(values: &Array2<u8>) -> Result<Array2<bool>> {
    if let Some(v) = values.iter().find(|&&v| !matches!(v, 0 | 1 | 255)) {
        return Err(FusionerError::invalid(format!("mask value {v} is not binary")));
    }
    Ok(values.mapv(|v| v != 0))
}

pub const CONVENTION: &str =
    "dataset-level IoU over queried categories; no background class; zero-union classes excluded";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: String,
    pub per_class_iou: BTreeMap<String, f64>,
    pub miou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fb_iou: Option<f64>,
    pub sample_count: usize,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_classes: Vec<String>,
    pub convention: String,
}

impl EvalReport {
    pub fn from_counters(
        counters: &IouCounters,
        fold: String,
        sample_count: usize,
        config_digest: String,
        with_fb_iou: bool,
    ) -> Result<Self> {
        Ok(Self {
            fold,
            per_class_iou: counters.per_class_iou(),
            miou: counters.miou()?,
            fb_iou: if with_fb_iou { Some(counters.fb_iou()?) } else { None },
            sample_count,
            config_digest,
            excluded_classes: counters.excluded_classes(),
            convention: CONVENTION.to_string(),
        })
    }

    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("serialisable")
    }

    pub fn table(&self) -> String {
        let width = self.per_class_iou.keys().map(|k| k.len()).max().unwrap_or(8).max(8);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "fold {} | {} samples | config {}",
            self.fold,
            self.sample_count,
            &self.config_digest[..self.config_digest.len().min(12)]
        );
        for (k, v) in &self.per_class_iou {
            let _ = writeln!(out, "  {k:<width$}  {:>6.2}", 100.0 * v);
        }
        let _ = write!(out, "  {:<width$}  {:>6.2}", "mIoU", 100.0 * self.miou);
        if let Some(fb) = self.fb_iou {
            let _ = write!(out, "\n  {:<width$}  {:>6.2}", "FB-IoU", 100.0 * fb);
        }
        out
    }
}

/// Hard failure if any evaluated category is a training category.
pub fn assert_unseen(split: &FoldSplit, categories: &[String]) -> Result<()> {
    split.check_disjoint()?;
    if let Some(c) = categories.iter().find(|c| split.is_train(c)) {
        return Err(FusionerError::invalid(format!(
            "category `{c}` is a training category of {}; refusing to evaluate it as unseen",
            split.descriptor()
        )));
    }
    Ok(())
}

/// Predicts every sample and scores it against its ground truth. Every
/// sample's query must be unseen under `split`.
pub fn evaluate_model(
    model: &FusionerModel,
    samples: &[PreparedSample],
    split: &FoldSplit,
    config_digest: &str,
    with_fb_iou: bool,
) -> Result<EvalReport> {
    for s in samples {
        assert_unseen(split, &s.categories)?;
    }
    score_samples(model, samples, &split.descriptor(), config_digest, with_fb_iou)
}

/// Scores samples without any vocabulary guard, e.g. to measure fit on the
/// training split.
pub fn score_samples(
    model: &FusionerModel,
    samples: &[PreparedSample],
    label: &str,
    config_digest: &str,
    with_fb_iou: bool,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    let table = text_table(model, samples)?;
    let per_sample: Vec<Result<IouCounters>> = samples
        .par_iter()
        .map(|s| {
            let pred = predict_prepared(model, s, &table)?;
            let mut c = IouCounters::new();
            c.accumulate(pred.masks.view(), s.masks.view(), &s.categories)?;
            Ok(c)
        })
        .collect();
    let mut total = IouCounters::new();
    for c in per_sample {
        total.merge(&c?);
    }
    EvalReport::from_counters(
        &total,
        label.to_string(),
        samples.len(),
        config_digest.to_string(),
        with_fb_iou,
    )
}

/// Fold reports plus their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub scheme: String,
    pub fold_labels: Vec<String>,
    pub reports: Vec<EvalReport>,
    pub mean_miou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_fb_iou: Option<f64>,
}

impl CrossValidation {
    /// One header row of fold labels and mIoU, then one row of values.
    pub fn table(&self) -> String {
        let mut header: Vec<String> = self.fold_labels.clone();
        header.push("mIoU".into());
        let mut row: Vec<String> = self.reports.iter().map(|r| format!("{:.1}", 100.0 * r.miou)).collect();
        row.push(format!("{:.1}", 100.0 * self.mean_miou));
        if let Some(fb) = self.mean_fb_iou {
            header.push("FB-IoU".into());
            row.push(format!("{:.1}", 100.0 * fb));
        }
        let cells = |v: &[String]| v.iter().map(|s| format!("{s:>7}")).collect::<Vec<_>>().join(" ");
        format!("{}\n{}", cells(&header), cells(&row))
    }
}

/// Runs `run` on every fold of `table` (train on the other folds, evaluate
/// on this one) and averages. Each split is checked for disjointness before
/// and each report's classes after.
pub fn cross_validate<F>(table: &FoldTable, mut run: F) -> Result<CrossValidation>
where
    F: FnMut(&FoldSplit) -> Result<EvalReport>,
{
    let mut reports = Vec::new();
    for fold in 0..table.folds.len() {
        let split = table.split(fold)?;
        split.check_disjoint()?;
        let report = run(&split)?;
        let evaluated: Vec<String> = report.per_class_iou.keys().cloned().collect();
        assert_unseen(&split, &evaluated)?;
        reports.push(report);
    }
    let mean_miou = miou(&reports.iter().map(|r| r.miou).collect::<Vec<_>>())?;
    let fbs: Option<Vec<f64>> = reports.iter().map(|r| r.fb_iou).collect();
    Ok(CrossValidation {
        scheme: table.scheme.to_string(),
        fold_labels: (0..table.folds.len()).map(|i| table.scheme.fold_label(i)).collect(),
        mean_fb_iou: fbs.map(|v| v.iter().sum::<f64>() / v.len() as f64),
        reports,
        mean_miou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn single(p: &[u8], g: &[u8], side: usize) -> (Array3<bool>, Array3<bool>) {
        let to = |v: &[u8]| Array3::from_shape_fn((side, side, 1), |(y, x, _)| v[y * side + x] == 1);
        (to(p), to(g))
    }

    #[test]
    fn hand_counted_iou() {
        // 4×4: pred 6 pixels, gt 5 pixels, overlap 3 → 3/8.
        #[rustfmt::skip]
        let p = [1,1,1,0, 1,1,1,0, 0,0,0,0, 0,0,0,0];
        #[rustfmt::skip]
        let g = [0,1,1,1, 0,0,1,1, 0,0,0,0, 0,0,0,0];
        let (p, g) = single(&p, &g, 4);
        let mut c = IouCounters::new();
        c.accumulate(p.view(), g.view(), &["x".into()]).unwrap();
        assert_eq!(c.per_class_iou()["x"], 3.0 / 8.0);
    }

    #[test]
    fn fb_iou_two_by_two() {
        let (p, g) = single(&[1, 1, 0, 0], &[1, 0, 0, 0], 2);
        assert!((fb_iou(p.view(), g.view()).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        let (p, g) = single(&[0; 4], &[0; 4], 2);
        assert_eq!(fb_iou(p.view(), g.view()).unwrap(), 1.0);
    }

    #[test]
    fn miou_basics() {
        assert_eq!(miou(&[0.5]).unwrap(), 0.5);
        assert_eq!(miou(&[1.0, 0.0]).unwrap(), 0.5);
        assert!(miou(&[]).is_err());
    }

    #[test]
    fn zero_union_classes_are_excluded() {
        let empty = Array3::from_elem((2, 2, 2), false);
        let mut gt = empty.clone();
        gt[[0, 0, 0]] = true;
        let mut c = IouCounters::new();
        c.accumulate(gt.view(), gt.view(), &["a".into(), "b".into()]).unwrap();
        assert_eq!(c.miou().unwrap(), 1.0);
        assert_eq!(c.excluded_classes(), ["b"]);
    }

    #[test]
    fn binary_mask_rejects_grey() {
        assert!(binary_mask(&Array2::from_elem((1, 1), 255)).unwrap()[[0, 0]]);
        assert!(binary_mask(&Array2::from_elem((1, 1), 128)).is_err());
    }

    #[test]
    fn seen_categories_are_refused() {
        let split = crate::data::build_fold_split(crate::data::SplitScheme::Pascal5i, 0).unwrap();
        assert!(assert_unseen(&split, &["bird".into()]).is_ok());
        assert!(assert_unseen(&split, &["cat".into()]).is_err());
    }
}
