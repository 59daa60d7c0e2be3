//! The ablation driver: component variants and fusion-size sweeps, each
//! trained from the same configuration and scored with one [`EvalReport`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{DatasetManifest, FoldSplit};
use crate::error::{FusionerError, Result};
use crate::eval::{evaluate_model, score_samples, EvalReport};
use crate::model::{Ablation, FusionerModel};
use crate::pipeline::{prepare_evaluation, prepare_training};
use crate::training::train;

/// One fusion-size cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionCell {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
}

impl fmt::Display for FusionCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}-H{}-W{}", self.layers, self.heads, self.width)
    }
}

/// What to run: component variants (with the configured fusion size) and
/// fusion-size cells (with the full model).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(default = "all_variants")]
    pub variants: Vec<Ablation>,
    #[serde(default)]
    pub layers: Vec<usize>,
    #[serde(default)]
    pub heads: Vec<usize>,
    #[serde(default)]
    pub widths: Vec<usize>,
}

fn all_variants() -> Vec<Ablation> {
    Ablation::ALL.to_vec()
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            variants: all_variants(),
            layers: Vec::new(),
            heads: Vec::new(),
            widths: Vec::new(),
        }
    }
}

/// Layer counts of the standard depth sweep (8 heads, width 512).
pub const DEPTH_SWEEP: [usize; 6] = [1, 3, 6, 12, 18, 24];

impl AblationGrid {
    /// The depth sweep at 8 heads and width 512, without component variants.
    pub fn depth_sweep() -> Self {
        Self {
            variants: Vec::new(),
            layers: DEPTH_SWEEP.to_vec(),
            heads: vec![8],
            widths: vec![512],
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FusionerError::config("<ablation grid>", e.to_string()))
    }

    /// Cartesian product of the size lists, missing lists taken from `base`.
    /// Cells whose width is not divisible by the head count are returned
    /// separately with the reason.
    pub fn cells(&self, base: &RunConfig) -> (Vec<FusionCell>, Vec<(FusionCell, String)>) {
        if self.layers.is_empty() && self.heads.is_empty() && self.widths.is_empty() {
            return (Vec::new(), Vec::new());
        }
        let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
        let (ls, hs, ws) = (
            or(&self.layers, base.fusion.layers),
            or(&self.heads, base.fusion.heads),
            or(&self.widths, base.fusion.width),
        );
        let mut valid = Vec::new();
        let mut skipped = Vec::new();
        for &layers in &ls {
            for &heads in &hs {
                for &width in &ws {
                    let cell = FusionCell { layers, heads, width };
                    if heads == 0 || width % heads != 0 {
                        skipped.push((cell, format!("width {width} is not divisible by {heads} heads")));
                    } else {
                        valid.push(cell);
                    }
                }
            }
        }
        (valid, skipped)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ablation: Ablation,
    pub fusion: FusionCell,
    pub trainable_params: usize,
    pub train_miou: f64,
    pub steps: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub label: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub skipped: Vec<SkippedCell>,
}

impl AblationTable {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<18} {:>10} {:>9} {:>9} {:>9}\n",
            "cell", "params", "mIoU", "FB-IoU", "train"
        );
        for r in &self.rows {
            let fb = r.report.fb_iou.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
            out.push_str(&format!(
                "{:<18} {:>10} {:>9.1} {:>9} {:>9.1}\n",
                r.label,
                r.trainable_params,
                100.0 * r.report.miou,
                fb,
                100.0 * r.train_miou
            ));
        }
        for s in &self.skipped {
            out.push_str(&format!("{:<18} skipped: {}\n", s.label, s.reason));
        }
        out
    }
}

/// Trains one cell in memory and scores it: on the test manifest's unseen
/// categories when one is configured, otherwise on the training images.
fn run_cell(cfg: &RunConfig, label: &str, test: Option<&DatasetManifest>, with_fb: bool) -> Result<AblationRow> {
    cfg.validate()?;
    let digest = cfg.digest();
    let mut model = FusionerModel::new(cfg.model_spec(), cfg.seed)?;
    let (split, samples): (FoldSplit, _) = prepare_training(cfg, &model)?;
    let summary = train(&mut model, &samples, &cfg.train, None)?;
    let train_fit = score_samples(&model, &samples, "train", &digest, false)?;
    let report = match test {
        Some(m) => {
            let eval = prepare_evaluation(&model, m, &split, cfg.data.image_size)?;
            evaluate_model(&model, &eval, &split, &digest, with_fb)?
        }
        None => score_samples(&model, &samples, "train", &digest, with_fb)?,
    };
    log::info!(
        "{label}: {} params, mIoU {:.4}, train mIoU {:.4}",
        model.trainable_count(),
        report.miou,
        train_fit.miou
    );
    Ok(AblationRow {
        label: label.to_string(),
        ablation: cfg.train.ablation,
        fusion: FusionCell {
            layers: cfg.fusion.layers,
            heads: cfg.fusion.heads,
            width: cfg.fusion.width,
        },
        trainable_params: model.trainable_count(),
        train_miou: train_fit.miou,
        steps: summary.steps,
        report,
    })
}

/// Runs every variant, then every valid size cell. Invalid cells are
/// skipped and logged.
pub fn run_ablation(cfg: &RunConfig, grid: &AblationGrid, with_fb_iou: bool) -> Result<AblationTable> {
    let test = cfg
        .data
        .test_manifest
        .as_deref()
        .map(DatasetManifest::load)
        .transpose()?;
    let mut rows = Vec::new();
    for &variant in &grid.variants {
        let mut c = cfg.clone();
        c.train.ablation = variant;
        rows.push(run_cell(&c, variant.as_str(), test.as_ref(), with_fb_iou)?);
    }
    let (cells, invalid) = grid.cells(cfg);
    let skipped: Vec<SkippedCell> = invalid
        .into_iter()
        .map(|(cell, reason)| {
            log::warn!("skipping ablation cell {cell}: {reason}");
            SkippedCell {
                label: cell.to_string(),
                reason,
            }
        })
        .collect();
    for cell in cells {
        let mut c = cfg.clone();
        c.train.ablation = Ablation::Full;
        c.fusion.layers = cell.layers;
        c.fusion.heads = cell.heads;
        c.fusion.width = cell.width;
        rows.push(run_cell(&c, &cell.to_string(), test.as_ref(), with_fb_iou)?);
    }
    Ok(AblationTable { rows, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t.tsv"), "").unwrap();
        let text = "output_dir = \"o\"\n[split]\nscheme = \"pascal5i\"\n[data]\ntrain_manifest = \"t.tsv\"\n";
        RunConfig::from_toml_str(text, &[], dir.path()).unwrap()
    }

    #[test]
    fn indivisible_cells_are_skipped() {
        let grid = AblationGrid {
            variants: vec![],
            layers: vec![1, 12],
            heads: vec![8, 5],
            widths: vec![512],
        };
        let (valid, skipped) = grid.cells(&base());
        assert!(valid.contains(&FusionCell {
            layers: 1,
            heads: 8,
            width: 512
        }));
        assert_eq!(valid.len(), 2);
        assert_eq!(skipped.len(), 2);
        assert!(skipped.iter().any(|(c, _)| *c
            == FusionCell {
                layers: 12,
                heads: 5,
                width: 512
            }));
    }

    #[test]
    fn depth_sweep_shape() {
        let (valid, skipped) = AblationGrid::depth_sweep().cells(&base());
        assert_eq!(valid.iter().map(|c| c.layers).collect::<Vec<_>>(), DEPTH_SWEEP);
        assert!(valid.iter().all(|c| c.width / c.heads == 64));
        assert!(skipped.is_empty());
    }

    #[test]
    fn default_grid_is_the_four_variants() {
        let g = AblationGrid::from_toml_str("").unwrap();
        assert_eq!(g.variants, Ablation::ALL);
        assert!(g.cells(&base()).0.is_empty());
    }
}
