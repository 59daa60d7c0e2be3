//! Checkpoint directories: `meta.json` plus one raw little-endian `f64` file
//! per trainable parameter under `params/`. Encoder weights are never
//! stored; the model spec names the encoders to rebuild.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::autograd::Mat;
use crate::data::FoldSplit;
use crate::error::{FusionerError, Result};
use crate::model::{FusionerModel, ModelSpec};
use crate::params::ParamSet;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config_digest: String,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub split: Option<FoldSplit>,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// SHA-256 of the frozen encoders' serialized state.
    pub encoder_state_sha256: String,
    pub params: Vec<ParamShape>,
}

impl CheckpointMeta {
    pub fn train_categories(&self) -> &[String] {
        self.split.as_ref().map_or(&[], |s| s.train_categories.as_slice())
    }
}

pub fn encoder_digest(model: &FusionerModel) -> String {
    hex::encode(Sha256::digest(model.encoder_state()))
}

/// Writes `meta` and the model's parameters into `dir`. The parameter list
/// in `meta` is filled in from the model.
pub fn save_checkpoint(dir: &Path, model: &FusionerModel, mut meta: CheckpointMeta) -> Result<()> {
    let pdir = dir.join("params");
    std::fs::create_dir_all(&pdir).map_err(|e| FusionerError::io(&pdir, e))?;
    meta.params = model
        .params
        .iter()
        .map(|(name, m)| ParamShape {
            name: name.clone(),
            rows: m.nrows(),
            cols: m.ncols(),
        })
        .collect();
    meta.encoder_state_sha256 = encoder_digest(model);
    for (name, m) in model.params.iter() {
        let bytes: Vec<u8> = m.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = pdir.join(format!("{name}.bin"));
        std::fs::write(&path, bytes).map_err(|e| FusionerError::io(&path, e))?;
    }
    let path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("serialisable");
    std::fs::write(&path, json).map_err(|e| FusionerError::io(&path, e))
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| FusionerError::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| FusionerError::format(&path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(FusionerError::format(
            &path,
            format!("unsupported checkpoint format {}", meta.format_version),
        ));
    }
    Ok(meta)
}

/// Loads a checkpoint and rebuilds its model. Fails if the rebuilt encoders
/// differ from the ones the checkpoint was trained with.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointMeta, FusionerModel)> {
    let meta = load_meta(dir)?;
    let mut params = ParamSet::new();
    for p in &meta.params {
        let path = dir.join("params").join(format!("{}.bin", p.name));
        let bytes = std::fs::read(&path).map_err(|e| FusionerError::io(&path, e))?;
        if bytes.len() != p.rows * p.cols * 8 {
            return Err(FusionerError::format(
                &path,
                format!("{} bytes for a {}x{} parameter", bytes.len(), p.rows, p.cols),
            ));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(
            p.name.clone(),
            Mat::from_shape_vec((p.rows, p.cols), values).expect("length checked"),
        );
    }
    let model = FusionerModel::with_params(meta.model.clone(), params)?;
    if encoder_digest(&model) != meta.encoder_state_sha256 {
        return Err(FusionerError::invalid(
            "encoders rebuilt from the checkpoint differ from the ones it was trained with",
        ));
    }
    Ok((meta, model))
}
