//! A generated coloured-shapes dataset for smoke tests and learnability
//! checks.
//!
//! Each image is a grey, lightly noisy canvas holding two shapes aligned to
//! a coarse cell grid. Categories are colour + shape names; the held-out
//! pair recombines colours and shapes that appear separately in training.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{save_gray, save_image, DatasetManifest, LabelEncoding, ManifestEntry};
use crate::encoders::ImageTensor;
use crate::error::{FusionerError, Result};

pub const TRAIN_CATEGORIES: [&str; 4] = ["red square", "green bar", "blue square", "yellow bar"];
pub const HELD_OUT_CATEGORIES: [&str; 2] = ["red bar", "green square"];

const BACKGROUND: [f64; 3] = [0.4, 0.4, 0.4];
const NOISE: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    /// 2×2 cells.
    Square,
    /// 1×3 cells, horizontal.
    Bar,
}

fn parse(category: &str) -> ([f64; 3], Shape) {
    let (colour, shape) = category.split_once(' ').expect("colour shape");
    let rgb = match colour {
        "red" => [0.9, 0.15, 0.1],
        "green" => [0.1, 0.8, 0.2],
        "blue" => [0.15, 0.25, 0.9],
        "yellow" => [0.9, 0.85, 0.1],
        other => unreachable!("colour {other}"),
    };
    let shape = match shape {
        "square" => Shape::Square,
        "bar" => Shape::Bar,
        other => unreachable!("shape {other}"),
    };
    (rgb, shape)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub image_size: usize,
    /// Side of one grid cell in pixels; shapes cover whole cells.
    pub cell: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            cell: 8,
            train_images: 48,
            test_images: 16,
            seed: 0,
        }
    }
}

/// Paths of the generated manifests.
#[derive(Clone, Debug)]
pub struct ShapesDataset {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

/// All six category names, train first; label value is index + 1.
pub fn all_categories() -> Vec<String> {
    TRAIN_CATEGORIES
        .iter()
        .chain(HELD_OUT_CATEGORIES.iter())
        .map(|s| s.to_string())
        .collect()
}

/// Picks non-overlapping cell rectangles `(row, col, height, width)` for
/// each category in turn, uniformly among the free positions. `None` when a
/// shape no longer fits.
fn place<R: Rng>(g: usize, categories: &[&str], rng: &mut R) -> Option<Vec<(usize, usize, usize, usize)>> {
    let mut occupied = Array2::from_elem((g, g), false);
    let mut out = Vec::with_capacity(categories.len());
    for cat in categories {
        let (sh, sw) = match parse(cat).1 {
            Shape::Square => (2, 2),
            Shape::Bar => (1, 3),
        };
        let free: Vec<(usize, usize)> = (0..=g - sh)
            .flat_map(|y| (0..=g - sw).map(move |x| (y, x)))
            .filter(|&(y, x)| (y..y + sh).all(|yy| (x..x + sw).all(|xx| !occupied[[yy, xx]])))
            .collect();
        if free.is_empty() {
            return None;
        }
        let (cy, cx) = free[rng.random_range(0..free.len())];
        for y in cy..cy + sh {
            for x in cx..cx + sw {
                occupied[[y, x]] = true;
            }
        }
        out.push((cy, cx, sh, sw));
    }
    Some(out)
}

/// Draws one image with the given categories. Returns the image and its
/// label map (0 background, `i + 1` for `all_categories()[i]`).
fn draw<R: Rng>(cfg: &ShapesConfig, categories: &[&str], rng: &mut R) -> (ImageTensor, Array2<u8>) {
    let n = cfg.image_size;
    let g = n / cfg.cell;
    let universe = all_categories();
    let placements = loop {
        if let Some(p) = place(g, categories, rng) {
            break p;
        }
    };
    let mut labels = Array2::zeros((n, n));
    let mut img = Array3::zeros((n, n, 3));
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                img[[y, x, c]] = BACKGROUND[c] + rng.random_range(-NOISE..NOISE);
            }
        }
    }
    for (cat, &(cy, cx, sh, sw)) in categories.iter().zip(&placements) {
        let (rgb, _) = parse(cat);
        let value = universe.iter().position(|u| u == cat).unwrap() as u8 + 1;
        for y in cy * cfg.cell..(cy + sh) * cfg.cell {
            for x in cx * cfg.cell..(cx + sw) * cfg.cell {
                labels[[y, x]] = value;
                for c in 0..3 {
                    img[[y, x, c]] = rgb[c] + rng.random_range(-NOISE..NOISE);
                }
            }
        }
    }
    img.mapv_inplace(|v: f64| v.clamp(0.0, 1.0));
    (ImageTensor::new(img).expect("finite"), labels)
}

/// Writes the dataset under `out`: `images/`, `masks/`, `train.tsv` (two
/// distinct training categories per image) and `test.tsv` (one held-out
/// plus one training category per image), each with a label sidecar.
pub fn generate_shapes_dataset(out: &Path, cfg: &ShapesConfig) -> Result<ShapesDataset> {
    if cfg.cell == 0 || !cfg.image_size.is_multiple_of(cfg.cell) || cfg.image_size / cfg.cell < 4 {
        return Err(FusionerError::invalid(
            "shapes image_size must be a multiple of cell with at least 4 cells per side",
        ));
    }
    for d in ["images", "masks"] {
        let p = out.join(d);
        std::fs::create_dir_all(&p).map_err(|e| FusionerError::io(&p, e))?;
    }
    let labels: std::collections::BTreeMap<u8, String> = all_categories()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as u8 + 1, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut write_split = |name: &str, count: usize, held_out: bool| -> Result<PathBuf> {
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let first = if held_out {
                HELD_OUT_CATEGORIES[i % HELD_OUT_CATEGORIES.len()]
            } else {
                TRAIN_CATEGORIES[i % TRAIN_CATEGORIES.len()]
            };
            let second = loop {
                let c = TRAIN_CATEGORIES[rng.random_range(0..TRAIN_CATEGORIES.len())];
                if c != first {
                    break c;
                }
            };
            let cats = [first, second];
            let (image, label_map) = draw(cfg, &cats, &mut rng);
            let id = format!("{name}_{i:03}");
            let image_rel = PathBuf::from("images").join(format!("{id}.png"));
            let mask_rel = PathBuf::from("masks").join(format!("{id}.png"));
            save_image(&image, &out.join(&image_rel))?;
            save_gray(&label_map, &out.join(&mask_rel))?;
            entries.push(ManifestEntry {
                image: image_rel,
                mask: mask_rel,
                categories: cats.iter().map(|s| s.to_string()).collect(),
            });
        }
        let m = DatasetManifest::new(
            out.to_path_buf(),
            entries,
            LabelEncoding::Indexed { labels: labels.clone() },
        )?;
        let path = out.join(format!("{name}.tsv"));
        m.save(&path)?;
        Ok(path)
    };
    let train_manifest = write_split("train", cfg.train_images, false)?;
    let test_manifest = write_split("test", cfg.test_images, true)?;
    Ok(ShapesDataset {
        train_manifest,
        test_manifest,
    })
}
