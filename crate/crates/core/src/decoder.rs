//! Modality-maintained upsampling and the cosine-similarity mask head.
//!
//! Fused visual tokens are reshaped to an `h × w × d` map and passed through
//! `k` stages of `3x3 conv (d→d) → GELU → 2x nearest upsample`, then resized
//! bilinearly to exactly `H × W`. Channel width stays `d` throughout so the
//! result lives in the same space as the fused text rows. Logits are cosine
//! similarities divided by a temperature.

use std::sync::Arc;

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Mat, RowMap, Tape, Var};
use crate::error::{FusionerError, Result};
use crate::params::{init_linear, linear, Bound, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalResize {
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub stages: usize,
    #[serde(default = "default_final_resize")]
    pub final_resize: FinalResize,
    pub threshold: f64,
    pub temperature: f64,
}

fn default_final_resize() -> FinalResize {
    FinalResize::Bilinear
}

/// Temperature dividing cosine similarities before the sigmoid.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            final_resize: FinalResize::Bilinear,
            threshold: 0.5,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(FusionerError::config("decoder.stages", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(FusionerError::config("decoder.temperature", "must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(FusionerError::config("decoder.threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Per-category prediction for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    /// `H × W × |W|` temperature-scaled cosine similarities.
    pub logits: Array3<f64>,
    pub probabilities: Array3<f64>,
    pub masks: Array3<bool>,
}

impl MaskPrediction {
    /// Builds a prediction from `(H·W) × C` row-major logits.
    pub fn from_logits(logits: &Mat, height: usize, width: usize, threshold: f64) -> Result<Self> {
        let c = logits.ncols();
        if logits.nrows() != height * width {
            return Err(FusionerError::dim(format!(
                "{} logit rows for a {height}x{width} image",
                logits.nrows()
            )));
        }
        let logits = logits
            .clone()
            .into_shape_with_order((height, width, c))
            .expect("row-major reshape");
        let probabilities = logits.mapv(sigmoid);
        let masks = probabilities.mapv(|p| p >= threshold);
        Ok(Self {
            logits,
            probabilities,
            masks,
        })
    }

    pub fn categories(&self) -> usize {
        self.logits.dim().2
    }

    pub fn mask(&self, c: usize) -> ndarray::ArrayView2<'_, bool> {
        self.masks.index_axis(Axis(2), c)
    }
}

/// Row-major reshape: token `i·w + j` becomes cell `(i, j)`.
pub fn tokens_to_map(tokens: &Mat, h: usize, w: usize) -> Result<Array3<f64>> {
    if tokens.nrows() != h * w {
        return Err(FusionerError::dim(format!(
            "{} tokens cannot fill a {h}x{w} grid",
            tokens.nrows()
        )));
    }
    let d = tokens.ncols();
    Ok(tokens
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h, w, d))
        .expect("row-major reshape"))
}

/// Inverse of [`tokens_to_map`].
pub fn map_to_tokens(map: &Array3<f64>) -> Mat {
    let (h, w, d) = map.dim();
    map.as_standard_layout()
        .into_owned()
        .into_shape_with_order((h * w, d))
        .expect("row-major reshape")
}

fn stage_prefix(s: usize) -> String {
    format!("decoder.s{s:02}.conv")
}

/// Adds the `k` convolution stages for channel width `d`. Each kernel is stored
/// as a `9d × d` matrix acting on 3x3 patches.
pub fn init_params<R: Rng + ?Sized>(cfg: &DecoderConfig, d: usize, rng: &mut R, set: &mut ParamSet) {
    for s in 0..cfg.stages {
        init_linear(set, rng, &stage_prefix(s), 9 * d, d);
    }
}

/// Decodes an `(h·w) × d` token map to `(out_h·out_w) × d`.
pub fn upsample_decode(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &DecoderConfig,
    fmap: Var,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Result<Var> {
    if cfg.stages == 0 {
        return Err(FusionerError::config("decoder.stages", "must be at least 1"));
    }
    if tape.shape(fmap).0 != h * w {
        return Err(FusionerError::dim(format!(
            "{} tokens for a {h}x{w} map",
            tape.shape(fmap).0
        )));
    }
    let (mut ch, mut cw) = (h, w);
    let mut x = fmap;
    for s in 0..cfg.stages {
        let patches = tape.im2col3x3(x, ch, cw);
        let y = linear(tape, bound, &stage_prefix(s), patches)?;
        let y = tape.gelu(y);
        x = tape.gather(y, Arc::new(RowMap::nearest_upsample2x(ch, cw)));
        ch *= 2;
        cw *= 2;
    }
    Ok(resize(tape, x, (ch, cw), (out_h, out_w)))
}

/// Parameter-free bilinear resize of a row-major map; identity when the sizes
/// already agree.
pub fn resize(tape: &mut Tape, x: Var, (h, w): (usize, usize), (out_h, out_w): (usize, usize)) -> Var {
    if (h, w) == (out_h, out_w) {
        x
    } else {
        tape.gather(x, Arc::new(RowMap::bilinear_resize(h, w, out_h, out_w)))
    }
}

/// `(H·W) × C` logits: cosine similarity of every pixel with every text row,
/// divided by the temperature. Zero-norm vectors give cosine 0.
pub fn mask_logits(tape: &mut Tape, vis: Var, txt: Var, temperature: f64) -> Result<Var> {
    let (dv, dt) = (tape.shape(vis).1, tape.shape(txt).1);
    if dv != dt {
        return Err(FusionerError::dim(format!(
            "pixel width {dv} differs from text width {dt}"
        )));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(FusionerError::config("decoder.temperature", "must be positive"));
    }
    let nv = tape.l2_normalize_rows(vis);
    let nt = tape.l2_normalize_rows(txt);
    let cos = tape.matmul_t(nv, nt);
    Ok(tape.scale(cos, 1.0 / temperature))
}

/// Array-level mask head over an `H × W × d` feature map.
pub fn compute_masks(vis: &Array3<f64>, txt: &Mat, cfg: &DecoderConfig) -> Result<MaskPrediction> {
    let (h, w, _) = vis.dim();
    let mut tape = Tape::new();
    let v = tape.constant(map_to_tokens(vis));
    let t = tape.constant(txt.clone());
    let logits = mask_logits(&mut tape, v, t, cfg.temperature)?;
    MaskPrediction::from_logits(tape.value(logits), h, w, cfg.threshold)
}

/// Array-level decoder forward: `h × w × d` map to `out_h × out_w × d`.
pub fn decode_map(
    params: &ParamSet,
    cfg: &DecoderConfig,
    fmap: &Array3<f64>,
    out: (usize, usize),
) -> Result<Array3<f64>> {
    let (h, w, _) = fmap.dim();
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let x = tape.constant(map_to_tokens(fmap));
    let y = upsample_decode(&mut tape, &bound, cfg, x, (h, w), out)?;
    tokens_to_map(tape.value(y), out.0, out.1)
}
