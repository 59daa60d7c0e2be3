//! Cross-modality fusion.
//!
//! Both modalities are first projected to a shared width `d`. Early fusion
//! concatenates `[visual; text]` along the token axis and runs a stack of
//! pre-norm transformer encoder layers over the joint sequence, so every
//! visual token can attend to every category embedding and vice versa. Late
//! fusion runs two independent residual MLP stacks and lets the modalities
//! meet only in the cosine mask head.
//!
//! No positional encoding is added here: visual tokens already carry the
//! encoder's positions, and text rows are an unordered set.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::encoders::{TextEmbeddings, VisualTokens};
use crate::error::{FusionerError, Result};
use crate::params::{init_linear, linear, Bound, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Early,
    Late,
}

impl FromStr for FusionMode {
    type Err = FusionerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Self::Early),
            "late" => Ok(Self::Late),
            other => Err(FusionerError::config(
                "fusion.mode",
                format!("unknown mode `{other}` (expected `early` or `late`)"),
            )),
        }
    }
}

/// How each modality is brought to the shared width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    /// `Linear(d_in→d) · GELU · Linear(d→d)`.
    Mlp,
    /// A single `Linear(d_in→d)`.
    Affine,
    /// Parameter-free truncation or zero-padding to `d`.
    WidthMatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    #[serde(default = "default_ffn_multiplier")]
    pub ffn_multiplier: usize,
    #[serde(default = "default_mlp_layers")]
    pub mlp_layers: usize,
    #[serde(default = "default_projector")]
    pub projector: ProjectorKind,
}

fn default_ffn_multiplier() -> usize {
    4
}

fn default_mlp_layers() -> usize {
    6
}

fn default_projector() -> ProjectorKind {
    ProjectorKind::Mlp
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Early,
            layers: 12,
            heads: 8,
            width: 512,
            ffn_multiplier: default_ffn_multiplier(),
            mlp_layers: default_mlp_layers(),
            projector: default_projector(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(FusionerError::config("fusion.width", "must be positive"));
        }
        if self.mode == FusionMode::Early {
            if self.heads == 0 {
                return Err(FusionerError::config("fusion.heads", "must be positive"));
            }
            if !self.width.is_multiple_of(self.heads) {
                return Err(FusionerError::config(
                    "fusion.heads",
                    format!("width {} is not divisible by {} heads", self.width, self.heads),
                ));
            }
            if self.ffn_multiplier == 0 {
                return Err(FusionerError::config("fusion.ffn_multiplier", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }
}

/// Fused outputs, with the same shapes as the projected inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub visual: Mat,
    pub text: Mat,
}

fn layer_prefix(l: usize) -> String {
    format!("fusion.l{l:02}")
}

/// Adds projector and fusion-block parameters for the given encoder widths.
pub fn init_params<R: Rng + ?Sized>(
    cfg: &FusionConfig,
    visual_dim: usize,
    text_dim: usize,
    rng: &mut R,
    set: &mut ParamSet,
) {
    let d = cfg.width;
    for (side, d_in) in [("visual", visual_dim), ("text", text_dim)] {
        match cfg.projector {
            ProjectorKind::Mlp => {
                init_linear(set, rng, &format!("proj.{side}.0"), d_in, d);
                init_linear(set, rng, &format!("proj.{side}.1"), d, d);
            }
            ProjectorKind::Affine => init_linear(set, rng, &format!("proj.{side}"), d_in, d),
            ProjectorKind::WidthMatch => {}
        }
    }
    match cfg.mode {
        FusionMode::Early => {
            for l in 0..cfg.layers {
                let p = layer_prefix(l);
                for ln in ["ln1", "ln2"] {
                    set.insert(format!("{p}.{ln}.g"), Mat::ones((1, d)));
                    set.insert(format!("{p}.{ln}.b"), Mat::zeros((1, d)));
                }
                for proj in ["q", "k", "v", "o"] {
                    init_linear(set, rng, &format!("{p}.attn.{proj}"), d, d);
                }
                let hidden = cfg.ffn_multiplier * d;
                init_linear(set, rng, &format!("{p}.ffn.0"), d, hidden);
                init_linear(set, rng, &format!("{p}.ffn.1"), hidden, d);
            }
            if cfg.layers > 0 {
                set.insert("fusion.ln_f.g", Mat::ones((1, d)));
                set.insert("fusion.ln_f.b", Mat::zeros((1, d)));
            }
        }
        FusionMode::Late => {
            for side in ["visual", "text"] {
                for l in 0..cfg.mlp_layers {
                    init_linear(set, rng, &format!("fusion.{side}.l{l:02}"), d, d);
                }
            }
        }
    }
}

fn width_match(tape: &mut Tape, x: Var, d: usize) -> Var {
    let (rows, cols) = tape.shape(x);
    match cols.cmp(&d) {
        std::cmp::Ordering::Equal => x,
        std::cmp::Ordering::Greater => tape.slice_cols(x, 0, d),
        std::cmp::Ordering::Less => {
            let pad = tape.constant(Mat::zeros((rows, d - cols)));
            tape.concat_cols(&[x, pad])
        }
    }
}

fn project_one(tape: &mut Tape, bound: &Bound, cfg: &FusionConfig, side: &str, x: Var) -> Result<Var> {
    match cfg.projector {
        ProjectorKind::Mlp => {
            let h = linear(tape, bound, &format!("proj.{side}.0"), x)?;
            let h = tape.gelu(h);
            linear(tape, bound, &format!("proj.{side}.1"), h)
        }
        ProjectorKind::Affine => linear(tape, bound, &format!("proj.{side}"), x),
        ProjectorKind::WidthMatch => Ok(width_match(tape, x, cfg.width)),
    }
}

/// Brings visual tokens and text rows to width `d`.
pub fn project(tape: &mut Tape, bound: &Bound, cfg: &FusionConfig, visual: Var, text: Var) -> Result<(Var, Var)> {
    let pv = project_one(tape, bound, cfg, "visual", visual)?;
    let pt = project_one(tape, bound, cfg, "text", text)?;
    Ok((pv, pt))
}

fn check_width(tape: &Tape, v: Var, d: usize, what: &str) -> Result<()> {
    let cols = tape.shape(v).1;
    if cols != d {
        return Err(FusionerError::dim(format!(
            "{what} has width {cols}, fusion width is {d}"
        )));
    }
    Ok(())
}

fn self_attention(tape: &mut Tape, bound: &Bound, cfg: &FusionConfig, prefix: &str, x: Var) -> Result<Var> {
    let q = linear(tape, bound, &format!("{prefix}.q"), x)?;
    let k = linear(tape, bound, &format!("{prefix}.k"), x)?;
    let v = linear(tape, bound, &format!("{prefix}.v"), x)?;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, i * hd, hd),
                tape.slice_cols(k, i * hd, hd),
                tape.slice_cols(v, i * hd, hd),
            )
        };
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, vh));
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    };
    linear(tape, bound, &format!("{prefix}.o"), joined)
}

/// One pre-norm encoder layer: `x + MHSA(LN(x))`, then `x + FFN(LN(x))`.
fn encoder_layer(tape: &mut Tape, bound: &Bound, cfg: &FusionConfig, l: usize, x: Var) -> Result<Var> {
    let p = layer_prefix(l);
    let h = tape.layer_norm(x, bound.var(&format!("{p}.ln1.g"))?, bound.var(&format!("{p}.ln1.b"))?);
    let a = self_attention(tape, bound, cfg, &format!("{p}.attn"), h)?;
    let x = tape.add(x, a);
    let h = tape.layer_norm(x, bound.var(&format!("{p}.ln2.g"))?, bound.var(&format!("{p}.ln2.b"))?);
    let f = linear(tape, bound, &format!("{p}.ffn.0"), h)?;
    let f = tape.gelu(f);
    let f = linear(tape, bound, &format!("{p}.ffn.1"), f)?;
    Ok(tape.add(x, f))
}

/// Joint self-attention over `[visual; text]` with a final layer norm, split
/// back afterwards.
pub fn fuse_early(tape: &mut Tape, bound: &Bound, cfg: &FusionConfig, pv: Var, pt: Var) -> Result<(Var, Var)> {
    check_width(tape, pv, cfg.width, "projected visual")?;
    check_width(tape, pt, cfg.width, "projected text")?;
    if cfg.layers == 0 {
        return Ok((pv, pt));
    }
    let (nv, nt) = (tape.shape(pv).0, tape.shape(pt).0);
    let mut x = tape.concat_rows(pv, pt);
    for l in 0..cfg.layers {
        x = encoder_layer(tape, bound, cfg, l, x)?;
    }
    let x = tape.layer_norm(x, bound.var("fusion.ln_f.g")?, bound.var("fusion.ln_f.b")?);
    Ok((tape.slice_rows(x, 0, nv), tape.slice_rows(x, nv, nt)))
}

fn mlp_stack(tape: &mut Tape, bound: &Bound, cfg: &FusionConfig, side: &str, mut x: Var) -> Result<Var> {
    for l in 0..cfg.mlp_layers {
        let h = linear(tape, bound, &format!("fusion.{side}.l{l:02}"), x)?;
        let h = tape.gelu(h);
        x = tape.add(x, h);
    }
    Ok(x)
}

/// Independent per-token residual MLP stacks, `x ← x + GELU(x·W + b)`.
pub fn fuse_late(tape: &mut Tape, bound: &Bound, cfg: &FusionConfig, pv: Var, pt: Var) -> Result<(Var, Var)> {
    check_width(tape, pv, cfg.width, "projected visual")?;
    check_width(tape, pt, cfg.width, "projected text")?;
    let v = mlp_stack(tape, bound, cfg, "visual", pv)?;
    let t = mlp_stack(tape, bound, cfg, "text", pt)?;
    Ok((v, t))
}

/// Projection followed by the configured fusion block.
pub fn fuse(tape: &mut Tape, bound: &Bound, cfg: &FusionConfig, visual: Var, text: Var) -> Result<(Var, Var)> {
    let (pv, pt) = project(tape, bound, cfg, visual, text)?;
    match cfg.mode {
        FusionMode::Early => fuse_early(tape, bound, cfg, pv, pt),
        FusionMode::Late => fuse_late(tape, bound, cfg, pv, pt),
    }
}

/// Array-level convenience wrapper around [`fuse`] for inference.
pub fn fuse_features(
    params: &ParamSet,
    cfg: &FusionConfig,
    visual: &VisualTokens,
    text: &TextEmbeddings,
) -> Result<FusedFeatures> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let v = tape.constant(visual.tokens().clone());
    let t = tape.constant(text.embeddings().clone());
    let (fv, ft) = fuse(&mut tape, &bound, cfg, v, t)?;
    Ok(FusedFeatures {
        visual: tape.value(fv).clone(),
        text: tape.value(ft).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type FuseFn = fn(&mut Tape, &Bound, &FusionConfig, Var, Var) -> Result<(Var, Var)>;

    fn randomize(set: &mut ParamSet, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, m) in set.iter_mut() {
            m.mapv_inplace(|v| v + rng.random_range(-std..std));
        }
    }

    fn run(set: &ParamSet, cfg: &FusionConfig, v: Mat, t: Mat, f: FuseFn) -> (Mat, Mat) {
        let mut tape = Tape::new();
        let bound = set.bind_frozen(&mut tape);
        let v = tape.constant(v);
        let t = tape.constant(t);
        let (a, b) = f(&mut tape, &bound, cfg, v, t).unwrap();
        (tape.value(a).clone(), tape.value(b).clone())
    }

    fn tiny(mode: FusionMode, projector: ProjectorKind, layers: usize, heads: usize, width: usize) -> FusionConfig {
        FusionConfig {
            mode,
            layers,
            heads,
            width,
            ffn_multiplier: 4,
            mlp_layers: layers,
            projector,
        }
    }

    #[test]
    fn identity_affine_projector_is_identity() {
        let cfg = tiny(FusionMode::Early, ProjectorKind::Affine, 0, 1, 3);
        let mut set = ParamSet::new();
        set.insert("proj.visual.w", Mat::eye(3));
        set.insert("proj.visual.b", Mat::zeros((1, 3)));
        set.insert("proj.text.w", Mat::eye(3));
        set.insert("proj.text.b", Mat::zeros((1, 3)));
        let v = array![[0.1, -2.0, 3.5], [4.0, 0.0, 1.0]];
        let t = array![[7.0, 8.0, 9.0]];
        let (pv, pt) = run(&set, &cfg, v.clone(), t.clone(), project);
        assert_eq!((pv, pt), (v.clone(), t.clone()));
        // L = 0 early fusion is the identity too.
        assert_eq!(run(&set, &cfg, v.clone(), t.clone(), fuse), (v, t));
    }

    #[test]
    fn hand_set_affine_projection() {
        let cfg = tiny(FusionMode::Early, ProjectorKind::Affine, 0, 1, 2);
        let mut set = ParamSet::new();
        set.insert("proj.visual.w", array![[1.0, 2.0], [3.0, 4.0]]);
        set.insert("proj.visual.b", array![[0.5, -0.5]]);
        set.insert("proj.text.w", Mat::eye(2));
        set.insert("proj.text.b", Mat::zeros((1, 2)));
        // [1, -1] · W = [1 - 3, 2 - 4] = [-2, -2]; + b = [-1.5, -2.5]
        let (pv, _) = run(&set, &cfg, array![[1.0, -1.0]], array![[0.0, 0.0]], project);
        assert_eq!(pv, array![[-1.5, -2.5]]);
    }

    #[test]
    fn projection_shape_contract() {
        let cfg = tiny(FusionMode::Early, ProjectorKind::Mlp, 0, 8, 512);
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_params(&cfg, 768, 512, &mut rng, &mut set);
        let (pv, pt) = run(&set, &cfg, Mat::zeros((196, 768)), Mat::zeros((5, 512)), project);
        assert_eq!((pv.dim(), pt.dim()), ((196, 512), (5, 512)));

        let mut tape = Tape::new();
        let bound = set.bind_frozen(&mut tape);
        let v = tape.constant(Mat::zeros((196, 700)));
        let t = tape.constant(Mat::zeros((5, 512)));
        assert!(matches!(
            project(&mut tape, &bound, &cfg, v, t),
            Err(FusionerError::Dimension(_))
        ));
    }

    #[test]
    fn width_match_truncates_and_pads() {
        let cfg = tiny(FusionMode::Early, ProjectorKind::WidthMatch, 0, 1, 3);
        let set = ParamSet::new();
        let (pv, pt) = run(&set, &cfg, array![[1.0, 2.0, 3.0, 4.0]], array![[5.0, 6.0]], project);
        assert_eq!(pv, array![[1.0, 2.0, 3.0]]);
        assert_eq!(pt, array![[5.0, 6.0, 0.0]]);
    }

    /// One attention layer worked by hand. All FFN weights are zero so the
    /// FFN residual adds nothing; the attention projections are identities.
    /// The final layer norm has unit gain and zero shift.
    #[test]
    fn single_layer_attention_by_hand() {
        let cfg = tiny(FusionMode::Early, ProjectorKind::WidthMatch, 1, 1, 2);
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_params(&cfg, 2, 2, &mut rng, &mut set);
        for (name, m) in set.iter_mut() {
            if name.contains(".attn.") && name.ends_with(".w") {
                *m = Mat::eye(2);
            } else if name.contains(".ffn.") {
                m.fill(0.0);
            }
        }
        let v = array![[1.0, 0.0], [0.0, 2.0]];
        let t = array![[3.0, 3.0]];
        let (fv, ft) = run(&set, &cfg, v.clone(), t.clone(), fuse_early);

        // LayerNorm over two features maps (a, b) to ±(a-b)/sqrt(((a-b)/2)^2 + eps) / 2.
        let ln = |a: f64, b: f64| {
            let m = (a + b) / 2.0;
            let var = ((a - m).powi(2) + (b - m).powi(2)) / 2.0;
            let is = 1.0 / (var + 1e-5).sqrt();
            [(a - m) * is, (b - m) * is]
        };
        let x = [[1.0, 0.0], [0.0, 2.0], [3.0, 3.0]];
        let h: Vec<[f64; 2]> = x.iter().map(|r| ln(r[0], r[1])).collect();
        let scale = 1.0 / 2f64.sqrt();
        let mut expected = [[0.0; 2]; 3];
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (h[i][0] * h[j][0] + h[i][1] * h[j][1]) * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..2 {
                let attn: f64 = (0..3).map(|j| e[j] / z * h[j][c]).sum();
                expected[i][c] = x[i][c] + attn;
            }
            expected[i] = ln(expected[i][0], expected[i][1]);
        }
        for i in 0..2 {
            for c in 0..2 {
                assert!((fv[[i, c]] - expected[i][c]).abs() < 1e-12);
            }
        }
        for c in 0..2 {
            assert!((ft[[0, c]] - expected[2][c]).abs() < 1e-12);
        }
    }

    #[test]
    fn late_fusion_by_hand() {
        let cfg = tiny(FusionMode::Late, ProjectorKind::WidthMatch, 2, 1, 2);
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_params(&cfg, 2, 2, &mut rng, &mut set);
        set.insert("fusion.visual.l00.w", array![[1.0, 0.0], [0.0, -1.0]]);
        set.insert("fusion.visual.l00.b", array![[0.5, 0.0]]);
        set.insert("fusion.visual.l01.w", array![[0.0, 1.0], [1.0, 0.0]]);
        set.insert("fusion.visual.l01.b", array![[0.0, 0.0]]);
        let g = crate::autograd::gelu_scalar;
        let x0 = [1.0, 2.0];
        let x1 = [x0[0] + g(x0[0] + 0.5), x0[1] + g(-x0[1])];
        let x2 = [x1[0] + g(x1[1]), x1[1] + g(x1[0])];
        let (fv, _) = run(&set, &cfg, array![[1.0, 2.0]], array![[0.0, 0.0]], fuse_late);
        assert!((fv[[0, 0]] - x2[0]).abs() < 1e-15);
        assert!((fv[[0, 1]] - x2[1]).abs() < 1e-15);
    }

    #[test]
    fn zero_initialised_late_stack_is_identity() {
        let cfg = tiny(FusionMode::Late, ProjectorKind::WidthMatch, 6, 1, 4);
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_params(&cfg, 4, 4, &mut rng, &mut set);
        set.iter_mut().for_each(|(_, m)| m.fill(0.0));
        let v = array![[1.0, -2.0, 3.0, 0.5]];
        let t = array![[0.0, 1.0, 2.0, 3.0], [4.0, 5.0, 6.0, 7.0]];
        assert_eq!(run(&set, &cfg, v.clone(), t.clone(), fuse_late), (v, t));
    }

    #[test]
    fn late_fusion_isolates_modalities_early_fusion_couples_them() {
        for (mode, coupled) in [(FusionMode::Late, false), (FusionMode::Early, true)] {
            let cfg = tiny(mode, ProjectorKind::Mlp, 2, 2, 8);
            let mut set = ParamSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            init_params(&cfg, 5, 6, &mut rng, &mut set);
            randomize(&mut set, 2, 0.5);
            let v = Mat::from_shape_fn((4, 5), |(i, j)| (i as f64 - j as f64) * 0.3);
            let t = Mat::from_shape_fn((2, 6), |(i, j)| (i * j) as f64 * 0.2 - 0.4);
            let mut t2 = t.clone();
            t2[[1, 3]] += 0.7;
            let (a, _) = run(&set, &cfg, v.clone(), t, fuse);
            let (b, _) = run(&set, &cfg, v, t2, fuse);
            assert_eq!(a != b, coupled, "{mode:?}");
        }
    }

    #[test]
    fn early_fusion_is_equivariant_to_text_row_order() {
        let cfg = tiny(FusionMode::Early, ProjectorKind::Mlp, 2, 2, 8);
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_params(&cfg, 5, 6, &mut rng, &mut set);
        randomize(&mut set, 4, 0.5);
        let v = Mat::from_shape_fn((4, 5), |(i, j)| ((i * 7 + j) % 5) as f64 * 0.2);
        let t = Mat::from_shape_fn((3, 6), |(i, j)| ((i * 3 + j) % 4) as f64 * 0.3 - 0.5);
        let mut t_perm = t.clone();
        t_perm.row_mut(0).assign(&t.row(2));
        t_perm.row_mut(2).assign(&t.row(0));
        let (va, ta) = run(&set, &cfg, v.clone(), t, fuse);
        let (vb, tb) = run(&set, &cfg, v, t_perm, fuse);
        assert!((&va - &vb).iter().all(|d| d.abs() < 1e-12));
        for (i, j) in [(0, 2), (1, 1), (2, 0)] {
            let d = &ta.slice(s![i, ..]) - &tb.slice(s![j, ..]);
            assert!(d.iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn default_config_shape_contract() {
        let cfg = FusionConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.head_dim(), 64);
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_params(&cfg, 1024, 768, &mut rng, &mut set);
        let vt = VisualTokens::new(Mat::from_elem((196, 1024), 0.1), 14, 14).unwrap();
        let te = TextEmbeddings::new(
            Mat::from_elem((4, 768), 0.2),
            ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let out = fuse_features(&set, &cfg, &vt, &te).unwrap();
        assert_eq!(out.visual.dim(), (196, 512));
        assert_eq!(out.text.dim(), (4, 512));
    }

    #[test]
    fn config_validation() {
        let mut cfg = FusionConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.mode = FusionMode::Late;
        assert!(cfg.validate().is_ok());
        assert!(matches!(
            "middle".parse::<FusionMode>(),
            Err(FusionerError::Config { .. })
        ));
    }
}
