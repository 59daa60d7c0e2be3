//! Mosaic-4 composites: 2×2 grids of four images with pairwise distinct
//! categories, each source image used at most once.
//!
//! Planning is a pure function of `(manifest, seed, tile_size)`. Images are
//! shuffled with the seed and drawn greedily; a candidate is rejected when its
//! category is already in the current tuple or when taking it would leave the
//! rest of the pool unable to fill the target number of composites. The target
//! is the largest `m` the category counts allow, which is `⌊N/4⌋` for
//! category-balanced sources.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{self, DatasetManifest, LabelEncoding, ManifestEntry};
use super::{load_sample, resize_image, resize_nearest};
use crate::encoders::ImageTensor;
use crate::error::{FusionerError, Result};

/// One tile: a source image (by manifest path) and its category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MosaicTile {
    pub image: String,
    pub category: String,
}

/// Reproducible description of a composite set. Tiles fill the grid
/// row-major: top-left, top-right, bottom-left, bottom-right.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MosaicSpec {
    pub seed: u64,
    pub tile_size: usize,
    pub grid: [usize; 2],
    pub composite_count: usize,
    pub composites: Vec<[MosaicTile; 4]>,
}

impl MosaicSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialisable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FusionerError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| FusionerError::format(path, e.to_string()))
    }

    pub fn composite_id(index: usize) -> String {
        format!("mosaic_{index:05}")
    }
}

/// Largest `m` with `Σ_c min(count_c, m) ≥ 4m`.
fn max_composites(counts: &[usize]) -> usize {
    let total: usize = counts.iter().sum();
    (0..=total / 4)
        .rev()
        .find(|&m| counts.iter().map(|&c| c.min(m)).sum::<usize>() >= 4 * m)
        .unwrap_or(0)
}

/// Whether `remaining` full composites can still be built after filling
/// the `slots` open places of the current tuple, whose categories are
/// marked in `used`.
fn feasible(counts: &[usize], used: &[bool], slots: usize, remaining: usize) -> bool {
    let capacity: usize = counts.iter().map(|&c| c.min(remaining)).sum();
    let open: Vec<usize> = counts
        .iter()
        .zip(used)
        .filter(|(&c, &u)| !u && c > 0)
        .map(|(&c, _)| c)
        .collect();
    if open.len() < slots {
        return false;
    }
    // Categories with more images than `remaining` can give one to the open
    // tuple for free; every other pick costs one unit of capacity.
    let spare = open.iter().filter(|&&c| c > remaining).count();
    capacity.saturating_sub(slots.saturating_sub(spare)) >= 4 * remaining
}

/// Plans composites over a manifest of single-category images.
pub fn plan_mosaic4(source: &DatasetManifest, seed: u64, tile_size: usize) -> Result<MosaicSpec> {
    if tile_size == 0 {
        return Err(FusionerError::invalid("tile size must be positive"));
    }
    let mut names: Vec<&str> = Vec::new();
    let mut pool: Vec<(String, usize)> = Vec::with_capacity(source.entries.len());
    for e in &source.entries {
        let [cat] = e.categories.as_slice() else {
            return Err(FusionerError::invalid(format!(
                "mosaic sources need exactly one category per image; {} lists {}",
                e.image.display(),
                e.categories.len()
            )));
        };
        let idx = match names.iter().position(|n| n == cat) {
            Some(i) => i,
            None => {
                names.push(cat);
                names.len() - 1
            }
        };
        pool.push((e.image.to_string_lossy().into_owned(), idx));
    }
    let mut counts = vec![0usize; names.len()];
    pool.iter().for_each(|(_, c)| counts[*c] += 1);
    let target = max_composites(&counts);
    if target == 0 {
        return Err(FusionerError::invalid(format!(
            "cannot form a 4-category composite from {} images over {} categories",
            pool.len(),
            names.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);

    let mut taken = vec![false; pool.len()];
    let mut composites = Vec::with_capacity(target);
    for built in 0..target {
        let remaining = target - built - 1;
        let mut used = vec![false; names.len()];
        let mut tuple: Vec<usize> = Vec::with_capacity(4);
        for (i, (_, cat)) in pool.iter().enumerate() {
            if tuple.len() == 4 {
                break;
            }
            if taken[i] || used[*cat] {
                continue;
            }
            counts[*cat] -= 1;
            used[*cat] = true;
            if feasible(&counts, &used, 3 - tuple.len(), remaining) {
                taken[i] = true;
                tuple.push(i);
            } else {
                counts[*cat] += 1;
                used[*cat] = false;
            }
        }
        debug_assert_eq!(tuple.len(), 4, "feasibility guard guarantees a full tuple");
        let tiles: Vec<MosaicTile> = tuple
            .iter()
            .map(|&i| MosaicTile {
                image: pool[i].0.clone(),
                category: names[pool[i].1].to_string(),
            })
            .collect();
        composites.push(<[MosaicTile; 4]>::try_from(tiles).expect("four tiles"));
    }
    let leftover = taken.iter().filter(|t| !**t).count();
    if leftover > 0 {
        log::info!("mosaic: {leftover} source images left over after {target} composites");
    }
    Ok(MosaicSpec {
        seed,
        tile_size,
        grid: [2, 2],
        composite_count: composites.len(),
        composites,
    })
}

/// Renders one composite: image plus `2t × 2t` label map with values `1..=4`
/// for the tile positions (0 = background).
pub fn render_composite(
    source: &DatasetManifest,
    tiles: &[MosaicTile; 4],
    tile_size: usize,
) -> Result<(ImageTensor, Array2<u8>)> {
    let by_path: BTreeMap<String, &ManifestEntry> = source
        .entries
        .iter()
        .map(|e| (e.image.to_string_lossy().into_owned(), e))
        .collect();
    let t = tile_size;
    let mut image = Array3::zeros((2 * t, 2 * t, 3));
    let mut labels = Array2::zeros((2 * t, 2 * t));
    for (k, tile) in tiles.iter().enumerate() {
        let entry = by_path
            .get(&tile.image)
            .ok_or_else(|| FusionerError::invalid(format!("tile image {} is not in the source", tile.image)))?;
        let sample = load_sample(source, entry, std::slice::from_ref(&tile.category), None)?;
        let img = resize_image(&sample.image, t, t)?;
        let mask = resize_nearest(&sample.masks.index_axis(ndarray::Axis(2), 0).to_owned(), t, t);
        let (oy, ox) = ((k / 2) * t, (k % 2) * t);
        image.slice_mut(s![oy..oy + t, ox..ox + t, ..]).assign(img.data());
        labels
            .slice_mut(s![oy..oy + t, ox..ox + t])
            .assign(&mask.mapv(|m| if m { k as u8 + 1 } else { 0 }));
    }
    Ok((ImageTensor::new(image)?, labels))
}

/// Writes every composite plus `manifest.tsv`, its positional-label sidecar
/// and `mosaic_spec.json` under `out`.
pub fn materialize_mosaic(source: &DatasetManifest, spec: &MosaicSpec, out: &Path) -> Result<DatasetManifest> {
    let images = out.join("images");
    let masks = out.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| FusionerError::io(d.as_path(), e))?;
    }
    let rendered: Vec<Result<ManifestEntry>> = {
        use rayon::prelude::*;
        spec.composites
            .par_iter()
            .enumerate()
            .map(|(i, tiles)| {
                let id = MosaicSpec::composite_id(i);
                let (image, labels) = render_composite(source, tiles, spec.tile_size)?;
                let image_rel = PathBuf::from("images").join(format!("{id}.png"));
                let mask_rel = PathBuf::from("masks").join(format!("{id}.png"));
                manifest::save_image(&image, &out.join(&image_rel))?;
                manifest::save_gray(&labels, &out.join(&mask_rel))?;
                Ok(ManifestEntry {
                    image: image_rel,
                    mask: mask_rel,
                    categories: tiles.iter().map(|t| t.category.clone()).collect(),
                })
            })
            .collect()
    };
    let entries = rendered.into_iter().collect::<Result<Vec<_>>>()?;
    let mut m = DatasetManifest::new(out.to_path_buf(), entries, LabelEncoding::Positional)?;
    m.category_universe = source.category_universe.clone();
    m.save(&out.join("manifest.tsv"))?;
    let spec_path = out.join("mosaic_spec.json");
    std::fs::write(&spec_path, spec.to_json()).map_err(|e| FusionerError::io(&spec_path, e))?;
    Ok(m)
}

/// Reads an FSS-1000 style tree `<dir>/<category>/<id>.jpg` with binary masks
/// `<id>.png` alongside. PNG images with `<id>_mask.png` masks are accepted
/// too. Categories and files are visited in sorted order.
pub fn load_fss_layout(dir: &Path) -> Result<DatasetManifest> {
    let read = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| FusionerError::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let mut entries = Vec::new();
    for cat_dir in read(dir)?.into_iter().filter(|p| p.is_dir()) {
        let category = cat_dir.file_name().unwrap().to_string_lossy().into_owned();
        let cat_name = PathBuf::from(&category);
        for file in read(&cat_dir)? {
            let name = file.file_name().unwrap().to_string_lossy().into_owned();
            let ext = file.extension().map(|e| e.to_string_lossy().to_lowercase());
            let stem = file.file_stem().unwrap().to_string_lossy().into_owned();
            let mask = match ext.as_deref() {
                Some("jpg") | Some("jpeg") => format!("{stem}.png"),
                Some("png") if !stem.ends_with("_mask") && cat_dir.join(format!("{stem}_mask.png")).exists() => {
                    format!("{stem}_mask.png")
                }
                _ => continue,
            };
            if !cat_dir.join(&mask).exists() {
                log::warn!("{}: no mask {mask}; skipped", file.display());
                continue;
            }
            entries.push(ManifestEntry {
                image: cat_name.join(&name),
                mask: cat_name.join(mask),
                categories: vec![category.clone()],
            });
        }
    }
    DatasetManifest::new(dir.to_path_buf(), entries, LabelEncoding::Positional)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(counts: &[usize]) -> DatasetManifest {
        let mut entries = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                entries.push(ManifestEntry {
                    image: format!("c{c}/{i}.png").into(),
                    mask: format!("c{c}/{i}_mask.png").into(),
                    categories: vec![format!("c{c}")],
                });
            }
        }
        DatasetManifest::new(PathBuf::from("."), entries, LabelEncoding::Positional).unwrap()
    }

    #[test]
    fn capacity_formula() {
        assert_eq!(max_composites(&[1, 1, 1, 1]), 1);
        assert_eq!(max_composites(&[10; 240]), 600);
        assert_eq!(max_composites(&[5, 1, 1, 1]), 1);
        assert_eq!(max_composites(&[3, 3, 3]), 0);
        assert_eq!(max_composites(&[3, 3, 3, 3, 1]), 3);
    }

    #[test]
    fn four_images_make_one_composite() {
        let spec = plan_mosaic4(&manifest(&[1, 1, 1, 1]), 7, 8).unwrap();
        assert_eq!(spec.composite_count, 1);
        let mut cats: Vec<_> = spec.composites[0].iter().map(|t| t.category.clone()).collect();
        cats.sort();
        assert_eq!(cats, ["c0", "c1", "c2", "c3"]);
    }

    #[test]
    fn impossible_source_is_rejected() {
        assert!(plan_mosaic4(&manifest(&[4, 4, 4]), 0, 8).is_err());
    }

    #[test]
    fn skewed_source_reaches_capacity() {
        // 13 images of c0 and one each of 9 others: capacity is 3.
        let mut counts = vec![13];
        counts.extend([1; 9]);
        for seed in 0..20 {
            let spec = plan_mosaic4(&manifest(&counts), seed, 8).unwrap();
            assert_eq!(spec.composite_count, 3, "seed {seed}");
        }
    }
}
