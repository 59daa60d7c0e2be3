//! Frozen visual and text encoder contracts.
//!
//! Encoders are opaque feature extractors behind the [`VisualBackend`] and
//! [`TextBackend`] traits. They never expose trainable parameters; the rest of
//! the system only sees their outputs as constants.

mod prompts;
pub mod registry;
pub mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array3, Axis};

use crate::autograd::Mat;
use crate::error::{FusionerError, Result};

pub use prompts::{PromptTemplateSet, DEFAULT_TEMPLATES, PLACEHOLDER};

/// An `H × W × 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(FusionerError::dim(format!("image must have 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(FusionerError::dim("image has zero extent"));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(FusionerError::invalid(format!(
                "image value {v} is not a finite number in [0, 1]"
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }
}

/// Encoder output for one image: `(h·w) × d_i` tokens in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokens {
    tokens: Mat,
    h: usize,
    w: usize,
}

impl VisualTokens {
    pub fn new(tokens: Mat, h: usize, w: usize) -> Result<Self> {
        if tokens.nrows() != h * w {
            return Err(FusionerError::dim(format!(
                "{} visual tokens for a {h}x{w} grid",
                tokens.nrows()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(FusionerError::Numerical("non-finite visual token".into()));
        }
        Ok(Self { tokens, h, w })
    }

    pub fn tokens(&self) -> &Mat {
        &self.tokens
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// One embedding row per category, in category order.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddings {
    embeddings: Mat,
    categories: Vec<String>,
}

impl TextEmbeddings {
    pub fn new(embeddings: Mat, categories: Vec<String>) -> Result<Self> {
        if embeddings.nrows() != categories.len() {
            return Err(FusionerError::dim(format!(
                "{} embedding rows for {} categories",
                embeddings.nrows(),
                categories.len()
            )));
        }
        Ok(Self { embeddings, categories })
    }

    pub fn embeddings(&self) -> &Mat {
        &self.embeddings
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

/// Opaque image feature extractor. Implementations must be pure.
pub trait VisualBackend: Send + Sync + fmt::Debug {
    fn kind(&self) -> &str;
    fn patch_size(&self) -> usize;
    fn embed_dim(&self) -> usize;
    /// Returns `(H/p · W/p) × embed_dim` features; the caller has already
    /// checked divisibility.
    fn extract(&self, image: &ImageTensor) -> Result<Mat>;
    /// Serialised frozen state, used to verify that training never touches it.
    fn state_bytes(&self) -> Vec<u8>;
}

/// Opaque string embedder. Implementations must be pure.
pub trait TextBackend: Send + Sync + fmt::Debug {
    fn kind(&self) -> &str;
    fn embed_dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
    fn state_bytes(&self) -> Vec<u8>;
}

#[derive(Clone, Debug)]
pub struct FrozenVisualEncoder {
    backend: Arc<dyn VisualBackend>,
}

impl FrozenVisualEncoder {
    pub fn new(backend: Arc<dyn VisualBackend>) -> Self {
        Self { backend }
    }

    pub fn kind(&self) -> &str {
        self.backend.kind()
    }

    pub fn patch_size(&self) -> usize {
        self.backend.patch_size()
    }

    pub fn embed_dim(&self) -> usize {
        self.backend.embed_dim()
    }

    pub fn state_bytes(&self) -> Vec<u8> {
        self.backend.state_bytes()
    }

    pub fn encode_image(&self, image: &ImageTensor) -> Result<VisualTokens> {
        let p = self.patch_size();
        let (hh, ww) = (image.height(), image.width());
        if hh % p != 0 || ww % p != 0 {
            return Err(FusionerError::dim(format!(
                "image {hh}x{ww} is not divisible by patch size {p}"
            )));
        }
        let (h, w) = (hh / p, ww / p);
        let tokens = self.backend.extract(image)?;
        if tokens.ncols() != self.embed_dim() {
            return Err(FusionerError::Backend {
                kind: self.kind().to_string(),
                message: format!("returned width {}, declared {}", tokens.ncols(), self.embed_dim()),
            });
        }
        VisualTokens::new(tokens, h, w)
    }
}

#[derive(Clone, Debug)]
pub struct FrozenTextEncoder {
    backend: Arc<dyn TextBackend>,
}

impl FrozenTextEncoder {
    pub fn new(backend: Arc<dyn TextBackend>) -> Self {
        Self { backend }
    }

    pub fn kind(&self) -> &str {
        self.backend.kind()
    }

    pub fn embed_dim(&self) -> usize {
        self.backend.embed_dim()
    }

    pub fn state_bytes(&self) -> Vec<u8> {
        self.backend.state_bytes()
    }

    fn embed_checked(&self, text: &str) -> Result<Vec<f64>> {
        let v = self.backend.embed(text)?;
        if v.len() != self.embed_dim() {
            return Err(FusionerError::Backend {
                kind: self.kind().to_string(),
                message: format!("returned width {}, declared {}", v.len(), self.embed_dim()),
            });
        }
        Ok(v)
    }

    /// Mean embedding of `category` rendered through every template.
    ///
    /// Encodings are summed in ascending order of the rendered prompt string,
    /// so any permutation of the template list gives a bit-identical result.
    pub fn ensemble_prompts(&self, category: &str, templates: &PromptTemplateSet) -> Result<Vec<f64>> {
        let mut prompts = templates.render(category);
        prompts.sort();
        let mut sum = vec![0.0; self.embed_dim()];
        for prompt in &prompts {
            let v = self.embed_checked(prompt)?;
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
        }
        let n = prompts.len() as f64;
        Ok(sum.into_iter().map(|s| s / n).collect())
    }

    pub fn encode_text(&self, categories: &[String], templates: &PromptTemplateSet) -> Result<TextEmbeddings> {
        if categories.is_empty() {
            return Err(FusionerError::invalid("no categories to encode"));
        }
        let mut seen = HashSet::new();
        for c in categories {
            if !seen.insert(c.as_str()) {
                return Err(FusionerError::invalid(format!("duplicate category `{c}`")));
            }
        }
        let mut embeddings = Mat::zeros((categories.len(), self.embed_dim()));
        for (mut row, c) in embeddings.axis_iter_mut(Axis(0)).zip(categories) {
            let v = self.ensemble_prompts(c, templates)?;
            row.assign(&ndarray::Array1::from(v));
        }
        TextEmbeddings::new(embeddings, categories.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::synthetic::{SyntheticTextBackend, SyntheticVisualBackend};
    use super::*;

    #[derive(Debug)]
    struct Lookup;

    impl TextBackend for Lookup {
        fn kind(&self) -> &str {
            "lookup"
        }
        fn embed_dim(&self) -> usize {
            2
        }
        fn embed(&self, text: &str) -> Result<Vec<f64>> {
            Ok(if text.starts_with("x") {
                vec![1.0, 0.0]
            } else {
                vec![0.0, 1.0]
            })
        }
        fn state_bytes(&self) -> Vec<u8> {
            Vec::new()
        }
    }

    #[derive(Debug)]
    struct Constant(Vec<f64>);

    impl TextBackend for Constant {
        fn kind(&self) -> &str {
            "constant"
        }
        fn embed_dim(&self) -> usize {
            self.0.len()
        }
        fn embed(&self, _: &str) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
        fn state_bytes(&self) -> Vec<u8> {
            Vec::new()
        }
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn patch_grid_token_counts() {
        for (p, expected) in [(16, 196), (14, 256)] {
            let enc = FrozenVisualEncoder::new(Arc::new(SyntheticVisualBackend::new(p, 8)));
            let tokens = enc.encode_image(&ImageTensor::zeros(224, 224)).unwrap();
            assert_eq!(tokens.tokens().nrows(), expected);
            assert_eq!(tokens.dim(), 8);
        }
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let enc = FrozenVisualEncoder::new(Arc::new(SyntheticVisualBackend::new(16, 8)));
        assert!(matches!(
            enc.encode_image(&ImageTensor::zeros(224, 230)),
            Err(FusionerError::Dimension(_))
        ));
    }

    #[test]
    fn image_values_are_validated() {
        let mut data = Array3::zeros((2, 2, 3));
        data[[0, 0, 0]] = 1.5;
        assert!(ImageTensor::new(data.clone()).is_err());
        data[[0, 0, 0]] = f64::NAN;
        assert!(ImageTensor::new(data).is_err());
        assert!(ImageTensor::new(Array3::zeros((2, 2, 4))).is_err());
    }

    #[test]
    fn constant_encoder_ensemble_is_the_constant() {
        let enc = FrozenTextEncoder::new(Arc::new(Constant(vec![0.25, -1.5, 3.0])));
        let v = enc.ensemble_prompts("cat", &PromptTemplateSet::default_set()).unwrap();
        assert_eq!(v, vec![0.25, -1.5, 3.0]);
    }

    #[test]
    fn two_template_mean() {
        let enc = FrozenTextEncoder::new(Arc::new(Lookup));
        let set = PromptTemplateSet::new(["x {category}", "y {category}"]).unwrap();
        assert_eq!(enc.ensemble_prompts("cat", &set).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn encode_text_rows_follow_categories() {
        let enc = FrozenTextEncoder::new(Arc::new(SyntheticTextBackend::new(6, 7)));
        let set = PromptTemplateSet::default_set();
        let one = enc.encode_text(&names(&["cat"]), &set).unwrap();
        assert_eq!(
            one.embeddings().row(0).to_vec(),
            enc.ensemble_prompts("cat", &set).unwrap()
        );

        let ab = enc.encode_text(&names(&["cat", "dog"]), &set).unwrap();
        let ba = enc.encode_text(&names(&["dog", "cat"]), &set).unwrap();
        assert_eq!(ab.embeddings().row(0), ba.embeddings().row(1));
        assert_eq!(ab.embeddings().row(1), ba.embeddings().row(0));

        assert!(enc.encode_text(&names(&["cat", "cat"]), &set).is_err());
        assert!(enc.encode_text(&[], &set).is_err());
    }

    #[test]
    fn changing_one_category_changes_one_row() {
        let enc = FrozenTextEncoder::new(Arc::new(SyntheticTextBackend::new(6, 1)));
        let set = PromptTemplateSet::single();
        let a = enc.encode_text(&names(&["cat", "dog", "bird"]), &set).unwrap();
        let b = enc.encode_text(&names(&["cat", "cow", "bird"]), &set).unwrap();
        let changed: Vec<usize> = (0..3)
            .filter(|&i| a.embeddings().row(i) != b.embeddings().row(i))
            .collect();
        assert_eq!(changed, vec![1]);
    }

    #[test]
    fn backend_width_lies_are_caught() {
        #[derive(Debug)]
        struct Liar;
        impl TextBackend for Liar {
            fn kind(&self) -> &str {
                "liar"
            }
            fn embed_dim(&self) -> usize {
                4
            }
            fn embed(&self, _: &str) -> Result<Vec<f64>> {
                Ok(vec![0.0; 3])
            }
            fn state_bytes(&self) -> Vec<u8> {
                Vec::new()
            }
        }
        let enc = FrozenTextEncoder::new(Arc::new(Liar));
        assert!(matches!(
            enc.ensemble_prompts("a", &PromptTemplateSet::single()),
            Err(FusionerError::Backend { .. })
        ));
    }
}
