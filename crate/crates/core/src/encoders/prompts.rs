//! Prompt templates used to decorate category names before text encoding.

use std::path::Path;

use crate::error::{FusionerError, Result};

pub const PLACEHOLDER: &str = "{category}";

/// The 32 decorations averaged for every category by default.
pub const DEFAULT_TEMPLATES: [&str; 32] = [
    "a bad photo of the {category}.",
    "a photo of the large {category}.",
    "a photo of the small {category}.",
    "a cropped photo of a {category}.",
    "This is a photo of a {category}",
    "This is a photo of a small {category}",
    "This is a photo of a medium {category}",
    "This is a photo of a large {category}",
    "This is a masked photo of a {category}",
    "This is a masked photo of a small {category}",
    "This is a masked photo of a medium {category}",
    "This is a masked photo of a large {category}",
    "This is a cropped photo of a {category}",
    "This is a cropped photo of a small {category}",
    "This is a cropped photo of a medium {category}",
    "This is a cropped photo of a large {category}",
    "A photo of a {category} in the scene",
    "a bad photo of the {category} in the scene",
    "a photo of the large {category} in the scene",
    "a photo of the small {category} in the scene",
    "a cropped photo of a {category} in the scene",
    "a photo of a masked {category} in the scene",
    "There is a {category} in the scene",
    "There is the {category} in the scene",
    "This is a {category} in the scene",
    "This is the {category} in the scene",
    "This is one {category} in the scene",
    "There is a masked {category} in the scene",
    "There is the masked {category} in the scene",
    "This is a masked {category} in the scene",
    "This is the masked {category} in the scene",
    "This is one masked {category} in the scene",
];

/// Ordered, validated list of templates, each with exactly one
/// `{category}` placeholder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplateSet {
    templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn new<I, S>(templates: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let templates: Vec<String> = templates.into_iter().map(Into::into).collect();
        if templates.is_empty() {
            return Err(FusionerError::invalid("prompt template set is empty"));
        }
        for t in &templates {
            let n = t.matches(PLACEHOLDER).count();
            if n != 1 {
                return Err(FusionerError::invalid(format!(
                    "template {t:?} has {n} `{PLACEHOLDER}` placeholders, expected exactly 1"
                )));
            }
        }
        Ok(Self { templates })
    }

    pub fn default_set() -> Self {
        Self::new(DEFAULT_TEMPLATES).expect("built-in templates are valid")
    }

    /// One template, for fast tests.
    pub fn single() -> Self {
        Self::new(["a photo of a {category}."]).expect("built-in template is valid")
    }

    /// One template per non-empty line.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FusionerError::io(path, e))?;
        Self::new(text.lines().map(str::trim_end).filter(|l| !l.trim().is_empty()))
            .map_err(|e| FusionerError::format(path, e.to_string()))
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Every template with the placeholder replaced by `category`.
    pub fn render(&self, category: &str) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| t.replacen(PLACEHOLDER, category, 1))
            .collect()
    }
}
