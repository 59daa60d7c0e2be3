//! Run configuration: one TOML file describing encoders, fusion, decoder,
//! training, split, data and output location.
//!
//! Values are layered: built-in defaults, then the file, then `key=value`
//! overrides from the command line. Relative paths are resolved against the
//! directory holding the file. The digest of the canonical JSON form of the
//! resolved configuration is stamped into every artifact a run writes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_fold_split, FoldSplit, SplitScheme};
use crate::decoder::DecoderConfig;
use crate::encoders::registry::{TextEncoderConfig, VisualEncoderConfig};
use crate::error::{FusionerError, Result};
use crate::fusion::FusionConfig;
use crate::model::ModelSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub scheme: SplitScheme,
    #[serde(default)]
    pub fold: usize,
    /// Held-out categories for `custom` and `fss1000`; the fixed schemes
    /// take theirs from the built-in benchmark lists.
    #[serde(default)]
    pub test_categories: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,
    /// Square side images are resized to; `None` keeps native sizes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds parameter initialisation. Data order is seeded by `train.seed`.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub visual_encoder: VisualEncoderConfig,
    #[serde(default)]
    pub text_encoder: TextEncoderConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Reads `path`, applies `overrides` (`dotted.key=value`), resolves
    /// relative paths and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FusionerError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, overrides, base)
    }

    pub fn from_toml_str(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| FusionerError::config("<config>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| FusionerError::config("<config>", e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        self.output_dir = join(&self.output_dir);
        self.data.train_manifest = join(&self.data.train_manifest);
        self.data.test_manifest = self.data.test_manifest.as_deref().map(join);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is serialisable")
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("configuration is serialisable");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            visual_encoder: self.visual_encoder.clone(),
            text_encoder: self.text_encoder.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
            ablation: self.train.ablation,
        }
    }

    /// Field-level checks that need no data beyond file existence.
    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        self.train.validate()?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(FusionerError::config("output_dir", "must not be empty"));
        }
        if !self.data.train_manifest.is_file() {
            return Err(FusionerError::config(
                "data.train_manifest",
                format!("no such file: {}", self.data.train_manifest.display()),
            ));
        }
        if let Some(p) = &self.data.test_manifest {
            if !p.is_file() {
                return Err(FusionerError::config(
                    "data.test_manifest",
                    format!("no such file: {}", p.display()),
                ));
            }
        }
        if self.data.image_size == Some(0) {
            return Err(FusionerError::config("data.image_size", "must be positive"));
        }
        match self.split.scheme {
            SplitScheme::Custom | SplitScheme::Fss1000 => {
                if self.split.test_categories.is_empty() {
                    return Err(FusionerError::config(
                        "split.test_categories",
                        format!("scheme {} needs an explicit held-out list", self.split.scheme),
                    ));
                }
            }
            _ => {
                if self.split.fold > 3 {
                    return Err(FusionerError::config("split.fold", "must be in 0..=3"));
                }
                if !self.split.test_categories.is_empty() {
                    return Err(FusionerError::config(
                        "split.test_categories",
                        format!("scheme {} has a fixed vocabulary", self.split.scheme),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The fold split, with `universe` (the training manifest's categories)
    /// used by schemes without a fixed vocabulary.
    pub fn fold_split(&self, universe: &[String]) -> Result<FoldSplit> {
        match self.split.scheme {
            SplitScheme::Custom | SplitScheme::Fss1000 => FoldSplit::from_universe(
                self.split.scheme,
                self.split.fold,
                universe,
                self.split.test_categories.clone(),
            )
            .map_err(|e| FusionerError::config("split.test_categories", e.to_string())),
            scheme => build_fold_split(scheme, self.split.fold),
        }
    }
}

/// Sets `dotted.key` in `table`. The value is parsed as a TOML value and
/// taken as a bare string when that fails, so `--set output_dir=runs/a`
/// works without quotes.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| FusionerError::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(FusionerError::config(key, "empty key segment"));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| FusionerError::config(key, format!("`{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"

[split]
scheme = "pascal5i"
fold = 2

[data]
train_manifest = "train.tsv"
"#;

    fn with_manifest() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train.tsv"), "").unwrap();
        dir
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let dir = with_manifest();
        let cfg = RunConfig::from_toml_str(MINIMAL, &[], dir.path()).unwrap();
        assert_eq!(cfg.fusion, FusionConfig::default());
        assert_eq!(cfg.train.base_lr, 0.001);
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        let split = cfg.fold_split(&[]).unwrap();
        assert_eq!(split.test_categories.len(), 5);
    }

    #[test]
    fn overrides_win_over_file_values() {
        let dir = with_manifest();
        let o = [
            "fusion.layers=3".to_string(),
            "train.ablation=no_fusion".into(),
            "output_dir=elsewhere".into(),
        ];
        let cfg = RunConfig::from_toml_str(MINIMAL, &o, dir.path()).unwrap();
        assert_eq!(cfg.fusion.layers, 3);
        assert_eq!(cfg.fusion.heads, FusionConfig::default().heads);
        assert_eq!(cfg.model_spec().ablation, crate::model::Ablation::NoFusion);
        assert_eq!(cfg.output_dir, dir.path().join("elsewhere"));
    }

    #[test]
    fn digest_tracks_content() {
        let dir = with_manifest();
        let a = RunConfig::from_toml_str(MINIMAL, &[], dir.path()).unwrap();
        let b = RunConfig::from_toml_str(MINIMAL, &[], dir.path()).unwrap();
        let c = RunConfig::from_toml_str(MINIMAL, &["seed=1".into()], dir.path()).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
        let back = RunConfig::from_toml_str(&a.to_toml(), &[], Path::new("/")).unwrap();
        assert_eq!(back.digest(), a.digest());
    }

    #[test]
    fn errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let field = |r: Result<RunConfig>| match r {
            Err(FusionerError::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(
            field(RunConfig::from_toml_str(MINIMAL, &[], dir.path())),
            "data.train_manifest"
        );
        let dir = with_manifest();
        let bad = ["fusion.heads=5".to_string(), "fusion.width=512".into()];
        assert_eq!(
            field(RunConfig::from_toml_str(MINIMAL, &bad, dir.path())),
            "fusion.heads"
        );
        assert_eq!(
            field(RunConfig::from_toml_str(
                MINIMAL,
                &["split.scheme=\"custom\"".into()],
                dir.path()
            )),
            "split.test_categories"
        );
        assert_eq!(
            field(RunConfig::from_toml_str(
                MINIMAL,
                &["train.warmup_epochs=100".into()],
                dir.path()
            )),
            "train.warmup_epochs"
        );
    }
}
