//! Open-vocabulary semantic segmentation by bridging frozen visual and text
//! encoders with a cross-modality fusion transformer, a channel-preserving
//! upsampling decoder and a cosine-similarity mask head.

pub mod ablation;
pub mod autograd;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod export;
pub mod fusion;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod training;

pub use error::{FusionerError, Result};
