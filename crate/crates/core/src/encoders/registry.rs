//! Construction of encoders from configuration.
//!
//! `synthetic` is always available for both modalities. External encoders are
//! plugged in through files found in the directory named by
//! [`REGISTRY_ENV`]; currently the `table` text kind reads precomputed prompt
//! embeddings exported from any real text model.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::synthetic::{SyntheticTextBackend, SyntheticVisualBackend};
use super::{FrozenTextEncoder, FrozenVisualEncoder, TextBackend};
use crate::error::{FusionerError, Result};

/// Environment variable naming the external encoder registry directory.
pub const REGISTRY_ENV: &str = "FUSIONER_REGISTRY";

pub const VISUAL_KINDS: &[&str] = &["synthetic"];
pub const TEXT_KINDS: &[&str] = &["synthetic", "table"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualEncoderConfig {
    pub kind: String,
    pub patch_size: usize,
    pub embed_dim: usize,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        Self {
            kind: "synthetic".into(),
            patch_size: 16,
            embed_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub kind: String,
    pub embed_dim: usize,
    #[serde(default)]
    pub seed: u64,
    /// Registry entry for non-synthetic kinds: a file name resolved against
    /// the registry directory, or an absolute path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// `default` (32 templates), `single`, or a path to a template file.
    #[serde(default = "default_templates")]
    pub templates: String,
}

fn default_templates() -> String {
    "default".into()
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            kind: "synthetic".into(),
            embed_dim: 64,
            seed: 0,
            source: None,
            templates: default_templates(),
        }
    }
}

impl TextEncoderConfig {
    pub fn template_set(&self) -> Result<super::PromptTemplateSet> {
        match self.templates.as_str() {
            "default" => Ok(super::PromptTemplateSet::default_set()),
            "single" => Ok(super::PromptTemplateSet::single()),
            path => super::PromptTemplateSet::from_file(Path::new(path)),
        }
    }
}

pub fn build_visual(cfg: &VisualEncoderConfig) -> Result<FrozenVisualEncoder> {
    if cfg.patch_size == 0 || cfg.embed_dim == 0 {
        return Err(FusionerError::config(
            "visual_encoder",
            "patch_size and embed_dim must be positive",
        ));
    }
    match cfg.kind.as_str() {
        "synthetic" => Ok(FrozenVisualEncoder::new(Arc::new(SyntheticVisualBackend::new(
            cfg.patch_size,
            cfg.embed_dim,
        )))),
        other => Err(unknown_kind("visual_encoder.kind", other, VISUAL_KINDS)),
    }
}

pub fn build_text(cfg: &TextEncoderConfig) -> Result<FrozenTextEncoder> {
    if cfg.embed_dim == 0 {
        return Err(FusionerError::config("text_encoder.embed_dim", "must be positive"));
    }
    match cfg.kind.as_str() {
        "synthetic" => Ok(FrozenTextEncoder::new(Arc::new(SyntheticTextBackend::new(
            cfg.embed_dim,
            cfg.seed,
        )))),
        "table" => {
            let source = cfg
                .source
                .as_deref()
                .ok_or_else(|| FusionerError::config("text_encoder.source", "the `table` kind needs a source file"))?;
            let table = EmbeddingTable::load(&resolve(source)?)?;
            if table.dim != cfg.embed_dim {
                return Err(FusionerError::config(
                    "text_encoder.embed_dim",
                    format!("table `{source}` has width {}", table.dim),
                ));
            }
            Ok(FrozenTextEncoder::new(Arc::new(table)))
        }
        other => Err(unknown_kind("text_encoder.kind", other, TEXT_KINDS)),
    }
}

fn unknown_kind(field: &str, kind: &str, known: &[&str]) -> FusionerError {
    FusionerError::config(
        field,
        format!(
            "unknown encoder kind `{kind}`; available kinds: {}. External encoders are \
             loaded from the directory in ${REGISTRY_ENV}",
            known.join(", ")
        ),
    )
}

fn resolve(source: &str) -> Result<PathBuf> {
    let path = Path::new(source);
    if path.is_absolute() {
        return Ok(path.to_path_buf());
    }
    let root = std::env::var_os(REGISTRY_ENV).ok_or_else(|| {
        FusionerError::config(
            "text_encoder.source",
            format!("relative source `{source}` needs ${REGISTRY_ENV} to be set"),
        )
    })?;
    Ok(PathBuf::from(root).join(path))
}

/// Precomputed prompt embeddings: `{"dim": n, "embeddings": {"prompt": [..]}}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| FusionerError::io(path, e))?;
        let table: Self = serde_json::from_slice(&bytes).map_err(|e| FusionerError::format(path, e.to_string()))?;
        if let Some((k, v)) = table.embeddings.iter().find(|(_, v)| v.len() != table.dim) {
            return Err(FusionerError::format(
                path,
                format!("entry {k:?} has width {}, expected {}", v.len(), table.dim),
            ));
        }
        Ok(table)
    }
}

impl TextBackend for EmbeddingTable {
    fn kind(&self) -> &str {
        "table"
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.embeddings
            .get(text)
            .cloned()
            .ok_or_else(|| FusionerError::Backend {
                kind: "table".into(),
                message: format!("no precomputed embedding for {text:?}"),
            })
    }

    fn state_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("serialisable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::PromptTemplateSet;

    #[test]
    fn synthetic_is_always_available() {
        let v = build_visual(&VisualEncoderConfig::default()).unwrap();
        assert_eq!(v.kind(), "synthetic");
        let t = build_text(&TextEncoderConfig::default()).unwrap();
        assert_eq!(t.embed_dim(), 64);
    }

    #[test]
    fn unknown_kind_names_the_field_and_registry() {
        let cfg = VisualEncoderConfig {
            kind: "clip-vit-l14".into(),
            ..Default::default()
        };
        let msg = build_visual(&cfg).unwrap_err().to_string();
        assert!(msg.contains("visual_encoder.kind"), "{msg}");
        assert!(msg.contains(REGISTRY_ENV), "{msg}");
    }

    #[test]
    fn table_kind_reads_precomputed_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.json");
        let mut embeddings = BTreeMap::new();
        embeddings.insert("a photo of a cat.".to_string(), vec![1.0, 2.0]);
        std::fs::write(
            &path,
            serde_json::to_vec(&EmbeddingTable { dim: 2, embeddings }).unwrap(),
        )
        .unwrap();
        let cfg = TextEncoderConfig {
            kind: "table".into(),
            embed_dim: 2,
            source: Some(path.to_string_lossy().into_owned()),
            ..Default::default()
        };
        let enc = build_text(&cfg).unwrap();
        let single = PromptTemplateSet::single();
        assert_eq!(enc.ensemble_prompts("cat", &single).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(
            enc.ensemble_prompts("dog", &single),
            Err(FusionerError::Backend { .. })
        ));
    }
}
