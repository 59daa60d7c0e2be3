//! The coloured-shapes toy: dataset plus a run configuration sized to train
//! in well under a minute on one CPU core.

use std::path::{Path, PathBuf};

use fusioner::data::shapes::{generate_shapes_dataset, ShapesConfig, HELD_OUT_CATEGORIES};
use fusioner::{FusionerError, Result};

/// The toy configuration. Paths are relative to the file, which sits next
/// to `data/`.
///
/// The frozen text space is only two-dimensional, so the fixed category
/// embeddings crowd each other; masks then depend on how well the model
/// conditions pixels on the query, which is what fusion provides.
pub fn toy_config(seed: u64) -> String {
    let held_out = HELD_OUT_CATEGORIES
        .iter()
        .map(|c| format!("\"{c}\""))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        r#"seed = {seed}
output_dir = "run"

[visual_encoder]
kind = "synthetic"
patch_size = 8
embed_dim = 32

[text_encoder]
kind = "synthetic"
embed_dim = 2
templates = "single"

[fusion]
mode = "early"
layers = 2
heads = 2
width = 32

[decoder]
stages = 3
threshold = 0.5
temperature = 0.07

[train]
base_lr = 0.0003
warmup_epochs = 5
total_epochs = 150
batch_size = 8
seed = {seed}

[split]
scheme = "custom"
test_categories = [{held_out}]

[data]
train_manifest = "data/train.tsv"
test_manifest = "data/test.tsv"
image_size = 32
"#
    )
}

/// Generates `out/data` and writes `out/toy.toml`; returns the config path.
pub fn write_toy(out: &Path, seed: u64) -> Result<PathBuf> {
    let data = out.join("data");
    generate_shapes_dataset(
        &data,
        &ShapesConfig {
            seed,
            ..Default::default()
        },
    )?;
    let path = out.join("toy.toml");
    std::fs::write(&path, toy_config(seed)).map_err(|e| FusionerError::io(&path, e))?;
    Ok(path)
}
