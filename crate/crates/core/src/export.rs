//! Prediction files on disk and scoring them.
//!
//! Each predicted image `id` produces one 0/255 PNG per category named
//! `<id>__<category>.png`, a sidecar `<id>.json` recording category order,
//! temperature, threshold and config digest, and optionally a colour overlay
//! `<id>__overlay.png`.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::manifest::{load_gray, save_gray, save_image};
use crate::data::{load_sample, DatasetManifest, FoldSplit};
use crate::decoder::MaskPrediction;
use crate::encoders::ImageTensor;
use crate::error::{FusionerError, Result};
use crate::eval::{assert_unseen, binary_mask, EvalReport, IouCounters};

/// Sidecar written next to the mask files of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub image_id: String,
    pub categories: Vec<String>,
    pub mask_files: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub temperature: f64,
    pub threshold: f64,
    pub config_digest: String,
}

/// Makes a category usable inside a file name.
pub fn sanitize(category: &str) -> String {
    category
        .chars()
        .map(|c| if matches!(c, '/' | '\\' | ':' | '\0') { '_' } else { c })
        .collect()
}

pub fn mask_file_name(image_id: &str, category: &str) -> String {
    format!("{image_id}__{}.png", sanitize(category))
}

pub fn sidecar_name(image_id: &str) -> String {
    format!("{image_id}.json")
}

/// Rejects empty or repeated category lists.
pub fn check_categories(categories: &[String]) -> Result<()> {
    if categories.is_empty() {
        return Err(FusionerError::invalid("at least one category is required"));
    }
    for (i, c) in categories.iter().enumerate() {
        if c.trim().is_empty() {
            return Err(FusionerError::invalid("category names must not be blank"));
        }
        if categories[..i].contains(c) {
            return Err(FusionerError::invalid(format!("category `{c}` is listed twice")));
        }
        if categories[..i].iter().any(|p| sanitize(p) == sanitize(c)) {
            return Err(FusionerError::invalid(format!(
                "category `{c}` maps to the same file name as an earlier one"
            )));
        }
    }
    Ok(())
}

/// Writes masks and the sidecar for one image; returns the sidecar.
pub fn write_prediction(
    dir: &Path,
    image_id: &str,
    categories: &[String],
    pred: &MaskPrediction,
    temperature: f64,
    threshold: f64,
    config_digest: &str,
) -> Result<PredictionMeta> {
    check_categories(categories)?;
    let (h, w, c) = pred.masks.dim();
    if c != categories.len() {
        return Err(FusionerError::dim(format!(
            "{c} mask channels for {} categories",
            categories.len()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| FusionerError::io(dir, e))?;
    let mut mask_files = Vec::with_capacity(c);
    for (k, cat) in categories.iter().enumerate() {
        let name = mask_file_name(image_id, cat);
        let values = pred.mask(k).mapv(|m| if m { 255u8 } else { 0 });
        save_gray(&values, &dir.join(&name))?;
        mask_files.push(name);
    }
    let meta = PredictionMeta {
        image_id: image_id.to_string(),
        categories: categories.to_vec(),
        mask_files,
        height: h,
        width: w,
        temperature,
        threshold,
        config_digest: config_digest.to_string(),
    };
    let path = dir.join(sidecar_name(image_id));
    let text = serde_json::to_string_pretty(&meta).expect("serialisable");
    std::fs::write(&path, text).map_err(|e| FusionerError::io(&path, e))?;
    Ok(meta)
}

/// Reads back the sidecar and masks of one image as `H × W × C`.
pub fn read_prediction(dir: &Path, image_id: &str) -> Result<(PredictionMeta, Array3<bool>)> {
    let path = dir.join(sidecar_name(image_id));
    let text = std::fs::read_to_string(&path).map_err(|e| FusionerError::io(&path, e))?;
    let meta: PredictionMeta = serde_json::from_str(&text).map_err(|e| FusionerError::format(&path, e.to_string()))?;
    if meta.mask_files.len() != meta.categories.len() {
        return Err(FusionerError::format(
            &path,
            "mask file list does not match the categories",
        ));
    }
    let mut masks = Array3::from_elem((meta.height, meta.width, meta.categories.len()), false);
    for (k, f) in meta.mask_files.iter().enumerate() {
        let p = dir.join(f);
        let m = binary_mask(&load_gray(&p)?).map_err(|e| FusionerError::format(&p, e.to_string()))?;
        if m.dim() != (meta.height, meta.width) {
            return Err(FusionerError::format(
                &p,
                format!("mask is {:?}, sidecar says {}x{}", m.dim(), meta.height, meta.width),
            ));
        }
        masks.index_axis_mut(Axis(2), k).assign(&m);
    }
    Ok((meta, masks))
}

/// Stable colour for a category: the first three bytes of its SHA-256,
/// lifted away from black so overlays stay visible.
pub fn overlay_color(category: &str) -> [f64; 3] {
    let h = Sha256::digest(category.as_bytes());
    [h[0], h[1], h[2]].map(|b| 0.25 + 0.75 * b as f64 / 255.0)
}

/// Blends each category's colour over the image where its mask is set.
/// Pixels claimed by several categories take the mean colour.
pub fn render_overlay(
    image: &ImageTensor,
    masks: &Array3<bool>,
    categories: &[String],
    alpha: f64,
) -> Result<ImageTensor> {
    let (h, w, c) = masks.dim();
    if (h, w) != (image.height(), image.width()) || c != categories.len() {
        return Err(FusionerError::dim(format!(
            "{h}x{w}x{c} masks for a {}x{} image with {} categories",
            image.height(),
            image.width(),
            categories.len()
        )));
    }
    let colors: Vec<[f64; 3]> = categories.iter().map(|n| overlay_color(n)).collect();
    let mut out = image.data().clone();
    for y in 0..h {
        for x in 0..w {
            let on: Vec<usize> = (0..c).filter(|&k| masks[[y, x, k]]).collect();
            if on.is_empty() {
                continue;
            }
            for ch in 0..3 {
                let col = on.iter().map(|&k| colors[k][ch]).sum::<f64>() / on.len() as f64;
                out[[y, x, ch]] = (1.0 - alpha) * out[[y, x, ch]] + alpha * col;
            }
        }
    }
    ImageTensor::new(out)
}

pub fn overlay_name(image_id: &str) -> String {
    format!("{image_id}__overlay.png")
}

pub fn write_overlay(
    dir: &Path,
    image_id: &str,
    image: &ImageTensor,
    masks: &Array3<bool>,
    categories: &[String],
) -> Result<PathBuf> {
    let path = dir.join(overlay_name(image_id));
    save_image(&render_overlay(image, masks, categories, 0.5)?, &path)?;
    Ok(path)
}

/// Scores a prediction directory against a manifest. Every manifest entry
/// must have a sidecar; ground truth is loaded for the sidecar's categories
/// at the prediction's size. With a split, every scored category must be
/// unseen under it.
pub fn evaluate_prediction_dir(
    dir: &Path,
    manifest: &DatasetManifest,
    split: Option<&FoldSplit>,
    label: &str,
    with_fb_iou: bool,
) -> Result<EvalReport> {
    let mut total = IouCounters::new();
    let mut digest: Option<String> = None;
    for entry in &manifest.entries {
        let (meta, pred) = read_prediction(dir, &entry.id())?;
        if let Some(split) = split {
            assert_unseen(split, &meta.categories)?;
        }
        match &digest {
            None => digest = Some(meta.config_digest.clone()),
            Some(d) if *d != meta.config_digest => {
                return Err(FusionerError::invalid(format!(
                    "prediction {} has config digest {}, others have {d}",
                    meta.image_id, meta.config_digest
                )));
            }
            _ => {}
        }
        let size = if meta.height == meta.width {
            Some(meta.height)
        } else {
            None
        };
        let sample = load_sample(manifest, entry, &meta.categories, size)?;
        if sample.masks.dim() != pred.dim() {
            return Err(FusionerError::dim(format!(
                "prediction {} is {:?}, ground truth is {:?}",
                meta.image_id,
                pred.dim(),
                sample.masks.dim()
            )));
        }
        total.accumulate(pred.view(), sample.masks.view(), &meta.categories)?;
    }
    EvalReport::from_counters(
        &total,
        label.to_string(),
        manifest.entries.len(),
        digest.unwrap_or_default(),
        with_fb_iou,
    )
}

/// `0/255` view of one channel, as written to disk.
pub fn mask_bytes(masks: &Array3<bool>, k: usize) -> Array2<u8> {
    masks.index_axis(Axis(2), k).mapv(|m| if m { 255 } else { 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn prediction() -> MaskPrediction {
        let logits = array![[1.0, -1.0], [-2.0, 3.0], [0.5, 0.5], [-0.1, -4.0]];
        MaskPrediction::from_logits(&logits, 2, 2, 0.5).unwrap()
    }

    #[test]
    fn round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let cats = vec!["cat".to_string(), "traffic/light".to_string()];
        let pred = prediction();
        let meta = write_prediction(dir.path(), "img7", &cats, &pred, 0.07, 0.5, "abc").unwrap();
        assert_eq!(meta.mask_files, ["img7__cat.png", "img7__traffic_light.png"]);
        let (back, masks) = read_prediction(dir.path(), "img7").unwrap();
        assert_eq!(back, meta);
        assert_eq!(masks, pred.masks);
        assert_eq!(mask_bytes(&masks, 0), array![[255, 0], [255, 0]]);
    }

    #[test]
    fn duplicate_categories_are_rejected() {
        assert!(check_categories(&["a".into(), "a".into()]).is_err());
        assert!(check_categories(&["a/b".into(), "a_b".into()]).is_err());
        assert!(check_categories(&[]).is_err());
        assert!(check_categories(&["a".into(), "b".into()]).is_ok());
    }

    #[test]
    fn overlay_colours_are_stable_and_distinct() {
        assert_eq!(overlay_color("dog"), overlay_color("dog"));
        assert_ne!(overlay_color("dog"), overlay_color("cat"));
        let img = ImageTensor::zeros(2, 2);
        let masks = Array3::from_shape_fn((2, 2, 1), |(y, _, _)| y == 0);
        let out = render_overlay(&img, &masks, &["dog".into()], 1.0).unwrap();
        let c = overlay_color("dog");
        assert_eq!(out.data()[[0, 1, 2]], c[2]);
        assert_eq!(out.data()[[1, 1, 2]], 0.0);
    }
}
