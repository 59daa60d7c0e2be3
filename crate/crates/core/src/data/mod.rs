//! Datasets: manifests, fold splits, sample loading, query vocabularies and
//! synthetic mosaic composites.

pub mod manifest;
pub mod mosaic;
pub mod shapes;
pub mod splits;

use std::collections::HashSet;

use image::imageops::FilterType;
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{DatasetManifest, LabelEncoding, ManifestEntry};
pub use splits::{build_fold_split, FoldSplit, FoldTable, SplitScheme};

use crate::encoders::ImageTensor;
use crate::error::{FusionerError, Result};

/// An image with one binary ground-truth mask per queried category.
#[derive(Clone, Debug)]
pub struct SegmentationSample {
    pub id: String,
    pub image: ImageTensor,
    /// Queried categories, in query order.
    pub categories: Vec<String>,
    /// `H × W × C`, channel `c` for `categories[c]`.
    pub masks: Array3<bool>,
}

impl SegmentationSample {
    pub fn new(id: String, image: ImageTensor, categories: Vec<String>, masks: Array3<bool>) -> Result<Self> {
        let (h, w, c) = masks.dim();
        if (h, w) != (image.height(), image.width()) || c != categories.len() {
            return Err(FusionerError::dim(format!(
                "sample {id}: masks are {h}x{w}x{c} for a {}x{} image with {} categories",
                image.height(),
                image.width(),
                categories.len()
            )));
        }
        Ok(Self {
            id,
            image,
            categories,
            masks,
        })
    }

    /// Ground truth for `category`; all-false when it is absent.
    pub fn mask_for(&self, category: &str) -> Array2<bool> {
        match self.categories.iter().position(|c| c == category) {
            Some(i) => self.masks.index_axis(Axis(2), i).to_owned(),
            None => Array2::from_elem((self.image.height(), self.image.width()), false),
        }
    }

    /// Stacks ground truth for `queried` into an `H × W × K` target.
    pub fn targets(&self, queried: &[String]) -> Array3<bool> {
        let views: Vec<Array2<bool>> = queried.iter().map(|q| self.mask_for(q)).collect();
        let views: Vec<ArrayView2<bool>> = views.iter().map(|v| v.view()).collect();
        ndarray::stack(Axis(2), &views)
            .unwrap_or_else(|_| Array3::from_elem((self.image.height(), self.image.width(), 0), false))
    }
}

/// Loads an entry with one ground-truth channel per queried category (all
/// false for categories absent from the label map), optionally resizing to
/// `size × size`: bilinear for the image, nearest-neighbour for labels.
pub fn load_sample(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    queried: &[String],
    size: Option<usize>,
) -> Result<SegmentationSample> {
    if queried.is_empty() {
        return Err(FusionerError::invalid(format!("sample {}: empty query", entry.id())));
    }
    let image_path = manifest.resolve(&entry.image);
    let mut image = manifest::load_image(&image_path)?;
    let mut labels = manifest.load_label_map(entry)?;
    if labels.dim() != (image.height(), image.width()) {
        return Err(FusionerError::format(
            manifest.resolve(&entry.mask),
            format!(
                "mask is {:?} but image is {}x{}",
                labels.dim(),
                image.height(),
                image.width()
            ),
        ));
    }
    if let Some(s) = size {
        if (image.height(), image.width()) != (s, s) {
            image = resize_image(&image, s, s)?;
            labels = resize_nearest(&labels, s, s);
        }
    }
    let (h, w) = labels.dim();
    let index: Vec<Option<u16>> = queried
        .iter()
        .map(|c| manifest.category_universe.iter().position(|u| u == c).map(|i| i as u16))
        .collect();
    let mut masks = Array3::from_elem((h, w, queried.len()), false);
    for ((y, x), l) in labels.indexed_iter() {
        if let Some(l) = l {
            for (c, idx) in index.iter().enumerate() {
                if *idx == Some(*l) {
                    masks[[y, x, c]] = true;
                }
            }
        }
    }
    SegmentationSample::new(entry.id(), image, queried.to_vec(), masks)
}

pub fn resize_image(image: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    let (h, w) = (image.height(), image.width());
    let data = image.data();
    let buf = image::Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| data[[y as usize, x as usize, c]] as f32;
        image::Rgb([px(0), px(1), px(2)])
    });
    let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    let mut arr = Array3::zeros((height, width, 3));
    for (x, y, px) in out.enumerate_pixels() {
        for c in 0..3 {
            arr[[y as usize, x as usize, c]] = (px.0[c] as f64).clamp(0.0, 1.0);
        }
    }
    ImageTensor::new(arr)
}

pub fn resize_nearest<T: Clone>(src: &Array2<T>, height: usize, width: usize) -> Array2<T> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((height, width), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / height as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / width as f64).floor() as usize;
        src[[sy.min(h - 1), sx.min(w - 1)]].clone()
    })
}

/// How the categories queried for one sample are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum QueryMode {
    /// Every allowed category present in the image.
    PresentOnly,
    /// Composites: exactly `k` allowed categories must be present.
    FixedK { k: usize },
    /// One present, allowed category chosen at random.
    SampleOne,
}

/// Chooses the categories to query for a sample. Only categories in
/// `allowed` (the active split) are ever returned.
pub fn query_vocabulary<R: Rng + ?Sized>(
    present: &[String],
    allowed: &[String],
    mode: QueryMode,
    rng: &mut R,
) -> Result<Vec<String>> {
    let allowed: HashSet<&str> = allowed.iter().map(String::as_str).collect();
    let mut seen = HashSet::new();
    let mut out: Vec<String> = present
        .iter()
        .filter(|c| allowed.contains(c.as_str()) && seen.insert(c.as_str()))
        .cloned()
        .collect();
    if out.is_empty() {
        return Err(FusionerError::invalid(
            "no present category belongs to the active split",
        ));
    }
    match mode {
        QueryMode::PresentOnly => {}
        QueryMode::FixedK { k } => {
            if k > allowed.len() {
                return Err(FusionerError::invalid(format!(
                    "cannot query {k} categories from a split of {}",
                    allowed.len()
                )));
            }
            if out.len() != k {
                return Err(FusionerError::invalid(format!(
                    "expected {k} present categories, found {}",
                    out.len()
                )));
            }
        }
        QueryMode::SampleOne => {
            let i = rng.random_range(0..out.len());
            out = vec![out.swap_remove(i)];
        }
    }
    Ok(out)
}
