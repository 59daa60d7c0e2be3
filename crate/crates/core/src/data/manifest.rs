//! Line-delimited dataset manifests.
//!
//! A manifest is a text file of records
//! `image_path<TAB>mask_path<TAB>cat1,cat2,...`, with relative paths resolved
//! against the manifest's directory. A JSON sidecar next to it
//! (`<stem>.labels.json`) says how mask pixel values map to category names:
//!
//! * `indexed`: `labels` maps pixel values to names for the whole dataset;
//! * `positional`: value `k` is the entry's `k`-th listed category, and for
//!   single-category entries any non-zero value is that category (binary
//!   masks such as FSS-1000's).
//!
//! Pixel value 0 is always background.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::encoders::ImageTensor;
use crate::error::{FusionerError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelEncoding {
    Indexed { labels: BTreeMap<u8, String> },
    Positional,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EncodingKind {
    Indexed,
    Positional,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    encoding: EncodingKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    labels: BTreeMap<u8, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    categories: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub categories: Vec<String>,
}

impl ManifestEntry {
    /// Image file stem, used as the sample id.
    pub fn id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory that relative entry paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub category_universe: Vec<String>,
    pub encoding: LabelEncoding,
}

pub fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("labels.json")
}

impl DatasetManifest {
    pub fn new(root: PathBuf, entries: Vec<ManifestEntry>, encoding: LabelEncoding) -> Result<Self> {
        let category_universe = match &encoding {
            LabelEncoding::Indexed { labels } => labels.values().cloned().collect(),
            LabelEncoding::Positional => {
                let mut seen = HashSet::new();
                entries
                    .iter()
                    .flat_map(|e| e.categories.iter())
                    .filter(|c| seen.insert(c.as_str()))
                    .cloned()
                    .collect()
            }
        };
        let m = Self {
            root,
            entries,
            category_universe,
            encoding,
        };
        m.validate(Path::new("<memory>"))?;
        Ok(m)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let universe: HashSet<&str> = self.category_universe.iter().map(String::as_str).collect();
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(c) = e.categories.iter().find(|c| !universe.contains(c.as_str())) {
                return Err(FusionerError::format(
                    path,
                    format!("entry {} lists `{c}`, which is not in the category universe", i + 1),
                ));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FusionerError::io(path, e))?;
        let side = sidecar_path(path);
        let side_bytes = std::fs::read(&side).map_err(|e| FusionerError::io(&side, e))?;
        let sidecar: Sidecar =
            serde_json::from_slice(&side_bytes).map_err(|e| FusionerError::format(&side, e.to_string()))?;

        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(FusionerError::format(
                    path,
                    format!("line {}: expected 3 tab-separated fields, got {}", n + 1, fields.len()),
                ));
            }
            let categories: Vec<String> = fields[2]
                .split(',')
                .map(str::trim)
                .filter(|c| !c.is_empty())
                .map(String::from)
                .collect();
            entries.push(ManifestEntry {
                image: PathBuf::from(fields[0]),
                mask: PathBuf::from(fields[1]),
                categories,
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let encoding = match sidecar.encoding {
            EncodingKind::Indexed => LabelEncoding::Indexed { labels: sidecar.labels },
            EncodingKind::Positional => LabelEncoding::Positional,
        };
        let mut m = Self::new(root, entries, encoding).map_err(|e| FusionerError::format(path, e.to_string()))?;
        if !sidecar.categories.is_empty() {
            m.category_universe = sidecar.categories;
        }
        m.validate(path)?;
        Ok(m)
    }

    /// Writes the manifest and its sidecar. Entry paths are written as given.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for e in &self.entries {
            let _ = writeln!(
                text,
                "{}\t{}\t{}",
                e.image.display(),
                e.mask.display(),
                e.categories.join(",")
            );
        }
        std::fs::write(path, text).map_err(|e| FusionerError::io(path, e))?;
        let (encoding, labels) = match &self.encoding {
            LabelEncoding::Indexed { labels } => (EncodingKind::Indexed, labels.clone()),
            LabelEncoding::Positional => (EncodingKind::Positional, BTreeMap::new()),
        };
        let sidecar = Sidecar {
            encoding,
            labels,
            categories: self.category_universe.clone(),
        };
        let side = sidecar_path(path);
        let bytes = serde_json::to_vec_pretty(&sidecar).expect("serialisable");
        std::fs::write(&side, bytes).map_err(|e| FusionerError::io(&side, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Decodes the entry's mask into per-pixel category names (`None` for
    /// background).
    pub fn load_label_map(&self, entry: &ManifestEntry) -> Result<Array2<Option<u16>>> {
        let path = self.resolve(&entry.mask);
        let img = image::open(&path).map_err(|e| image_error(&path, e))?.to_luma8();
        let (w, h) = img.dimensions();
        let mut out = Array2::from_elem((h as usize, w as usize), None);
        for (x, y, px) in img.enumerate_pixels() {
            out[[y as usize, x as usize]] = self.decode_label(entry, px.0[0], &path)?;
        }
        Ok(out)
    }

    /// Index into `category_universe` for a raw mask value.
    fn decode_label(&self, entry: &ManifestEntry, value: u8, path: &Path) -> Result<Option<u16>> {
        if value == 0 {
            return Ok(None);
        }
        let name = match &self.encoding {
            LabelEncoding::Indexed { labels } => labels.get(&value).ok_or_else(|| {
                FusionerError::format(path, format!("mask value {value} is not in the label sidecar"))
            })?,
            LabelEncoding::Positional => {
                if entry.categories.len() == 1 {
                    &entry.categories[0]
                } else {
                    entry.categories.get(value as usize - 1).ok_or_else(|| {
                        FusionerError::format(
                            path,
                            format!(
                                "mask value {value} exceeds the {} listed categories",
                                entry.categories.len()
                            ),
                        )
                    })?
                }
            }
        };
        let idx = self
            .category_universe
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| FusionerError::format(path, format!("label `{name}` is not in the universe")))?;
        Ok(Some(idx as u16))
    }
}

pub(crate) fn image_error(path: &Path, e: image::ImageError) -> FusionerError {
    match e {
        image::ImageError::IoError(io) => FusionerError::io(path, io),
        other => FusionerError::format(path, other.to_string()),
    }
}

/// Reads an RGB image into `[0, 1]` reals.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(data)
}

/// Writes an image tensor as 8-bit RGB PNG.
pub fn save_image(image: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let data = image.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (data[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Reads a single-channel 8-bit image (colour images are converted).
pub fn load_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0]
    }))
}

/// Writes a single-channel 8-bit PNG.
pub fn save_gray(values: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([values[[y as usize, x as usize]]])
    });
    buf.save(path).map_err(|e| image_error(path, e))
}
