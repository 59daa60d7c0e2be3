//! The assembled segmenter: frozen encoders, fusion, decoder and mask head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::decoder::{self, DecoderConfig, MaskPrediction};
use crate::encoders::registry::{build_text, build_visual, TextEncoderConfig, VisualEncoderConfig};
use crate::encoders::{FrozenTextEncoder, FrozenVisualEncoder, ImageTensor, PromptTemplateSet, TextEmbeddings};
use crate::error::{FusionerError, Result};
use crate::fusion::{self, FusionConfig, FusionMode, ProjectorKind};
use crate::params::{Bound, ParamSet};

/// Component ablations. Variants without fusion replace the projectors by
/// parameter-free width matching; variants without the decoder resize the
/// token map bilinearly to the image size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoDecoder,
    NoFusion,
    Neither,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoDecoder,
        Ablation::NoFusion,
        Ablation::Neither,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoDecoder => "no_decoder",
            Ablation::NoFusion => "no_fusion",
            Ablation::Neither => "neither",
        }
    }

    pub fn uses_fusion(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoDecoder)
    }

    pub fn uses_decoder(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoFusion)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = FusionerError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| FusionerError::config("train.ablation", format!("unknown ablation `{s}`")))
    }
}

/// Everything needed to rebuild a model's architecture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub visual_encoder: VisualEncoderConfig,
    #[serde(default)]
    pub text_encoder: TextEncoderConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub ablation: Ablation,
}

impl ModelSpec {
    /// The fusion configuration actually run, after applying the ablation.
    pub fn effective_fusion(&self) -> FusionConfig {
        if self.ablation.uses_fusion() {
            self.fusion.clone()
        } else {
            FusionConfig {
                mode: FusionMode::Early,
                layers: 0,
                projector: ProjectorKind::WidthMatch,
                ..self.fusion.clone()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_fusion().validate()?;
        self.decoder.validate()
    }
}

pub struct FusionerModel {
    pub spec: ModelSpec,
    pub visual: FrozenVisualEncoder,
    pub text: FrozenTextEncoder,
    pub templates: PromptTemplateSet,
    pub params: ParamSet,
}

impl FusionerModel {
    /// Builds encoders from the spec and initialises trainable parameters
    /// from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let visual = build_visual(&spec.visual_encoder)?;
        let text = build_text(&spec.text_encoder)?;
        let templates = spec.text_encoder.template_set()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fusion::init_params(
            &spec.effective_fusion(),
            visual.embed_dim(),
            text.embed_dim(),
            &mut rng,
            &mut params,
        );
        if spec.ablation.uses_decoder() {
            decoder::init_params(&spec.decoder, spec.fusion.width, &mut rng, &mut params);
        }
        Ok(Self {
            spec,
            visual,
            text,
            templates,
            params,
        })
    }

    /// Rebuilds a model around previously trained parameters. Every expected
    /// parameter must be present with the right shape.
    pub fn with_params(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        for (name, fresh) in model.params.iter() {
            let loaded = params
                .get(name)
                .ok_or_else(|| FusionerError::invalid(format!("checkpoint is missing parameter `{name}`")))?;
            if loaded.dim() != fresh.dim() {
                return Err(FusionerError::dim(format!(
                    "parameter `{name}` is {:?} in the checkpoint, expected {:?}",
                    loaded.dim(),
                    fresh.dim()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| model.params.get(n).is_none()) {
            return Err(FusionerError::invalid(format!(
                "checkpoint has unexpected parameter `{extra}`"
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Frozen encoder state, for integrity checks.
    pub fn encoder_state(&self) -> Vec<u8> {
        let mut bytes = self.visual.state_bytes();
        bytes.extend(self.text.state_bytes());
        bytes
    }

    pub fn embed_categories(&self, categories: &[String]) -> Result<TextEmbeddings> {
        self.text.encode_text(categories, &self.templates)
    }

    /// Logits `(H·W) × C` on a tape, from encoder outputs.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &Mat,
        grid: (usize, usize),
        text: &Mat,
        out: (usize, usize),
    ) -> Result<Var> {
        let v = tape.constant(tokens.clone());
        let t = tape.constant(text.clone());
        let (fv, ft) = fusion::fuse(tape, bound, &self.spec.effective_fusion(), v, t)?;
        let pixels = if self.spec.ablation.uses_decoder() {
            decoder::upsample_decode(tape, bound, &self.spec.decoder, fv, grid, out)?
        } else {
            decoder::resize(tape, fv, grid, out)
        };
        decoder::mask_logits(tape, pixels, ft, self.spec.decoder.temperature)
    }

    pub fn predict(&self, image: &ImageTensor, categories: &[String]) -> Result<MaskPrediction> {
        let text = self.embed_categories(categories)?;
        self.predict_with(image, text.embeddings())
    }

    /// Prediction with precomputed text embeddings (rows in query order).
    pub fn predict_with(&self, image: &ImageTensor, text: &Mat) -> Result<MaskPrediction> {
        let tokens = self.visual.encode_image(image)?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let (h, w) = (image.height(), image.width());
        let logits = self.forward(&mut tape, &bound, tokens.tokens(), tokens.grid(), text, (h, w))?;
        MaskPrediction::from_logits(tape.value(logits), h, w, self.spec.decoder.threshold)
    }
}
