//! Deterministic, dependency-free stand-in encoders.
//!
//! The visual encoder emits per-patch mean RGB followed by a sinusoidal code
//! of the patch position, tiled to the requested width. The text encoder
//! hashes the string (with a seed) into a fixed pseudo-random unit vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ImageTensor, TextBackend, VisualBackend};
use crate::autograd::Mat;
use crate::error::Result;

/// Number of sinusoid frequencies per grid axis.
pub const POSITION_FREQUENCIES: usize = 4;

/// Width of the untiled per-patch feature: 3 colour channels plus
/// `sin`/`cos` of row and column at each frequency.
pub const BASE_WIDTH: usize = 3 + 4 * POSITION_FREQUENCIES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVisualBackend {
    patch_size: usize,
    embed_dim: usize,
}

impl SyntheticVisualBackend {
    pub fn new(patch_size: usize, embed_dim: usize) -> Self {
        assert!(patch_size > 0 && embed_dim > 0);
        Self { patch_size, embed_dim }
    }

    fn frequency(f: usize) -> f64 {
        100f64.powf(-(f as f64) / POSITION_FREQUENCIES as f64)
    }

    fn base_vector(rgb: [f64; 3], row: usize, col: usize) -> [f64; BASE_WIDTH] {
        let mut base = [0.0; BASE_WIDTH];
        base[..3].copy_from_slice(&rgb);
        for f in 0..POSITION_FREQUENCIES {
            let omega = Self::frequency(f);
            let (r, c) = (row as f64 * omega, col as f64 * omega);
            let o = 3 + 4 * f;
            base[o] = r.sin();
            base[o + 1] = r.cos();
            base[o + 2] = c.sin();
            base[o + 3] = c.cos();
        }
        base
    }

    fn tile(&self, base: &[f64; BASE_WIDTH]) -> impl Iterator<Item = f64> + '_ {
        let base = *base;
        (0..self.embed_dim).map(move |k| base[k % BASE_WIDTH])
    }

    /// The token produced by an all-black patch at grid cell `(row, col)`.
    pub fn position_embedding(&self, row: usize, col: usize) -> Vec<f64> {
        self.tile(&Self::base_vector([0.0; 3], row, col)).collect()
    }
}

impl VisualBackend for SyntheticVisualBackend {
    fn kind(&self) -> &str {
        "synthetic"
    }

    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn extract(&self, image: &ImageTensor) -> Result<Mat> {
        let p = self.patch_size;
        let (h, w) = (image.height() / p, image.width() / p);
        let data = image.data();
        let area = (p * p) as f64;
        let mut out = Mat::zeros((h * w, self.embed_dim));
        for i in 0..h {
            for j in 0..w {
                let mut rgb = [0.0; 3];
                for y in i * p..(i + 1) * p {
                    for x in j * p..(j + 1) * p {
                        for (ch, acc) in rgb.iter_mut().enumerate() {
                            *acc += data[[y, x, ch]];
                        }
                    }
                }
                rgb.iter_mut().for_each(|v| *v /= area);
                let base = Self::base_vector(rgb, i, j);
                for (dst, v) in out.row_mut(i * w + j).iter_mut().zip(self.tile(&base)) {
                    *dst = v;
                }
            }
        }
        Ok(out)
    }

    fn state_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("serialisable")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTextBackend {
    embed_dim: usize,
    seed: u64,
}

impl SyntheticTextBackend {
    pub fn new(embed_dim: usize, seed: u64) -> Self {
        assert!(embed_dim > 0);
        Self { embed_dim, seed }
    }
}

impl TextBackend for SyntheticTextBackend {
    fn kind(&self) -> &str {
        "synthetic"
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut v: Vec<f64> = (0..self.embed_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }

    fn state_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("serialisable")
    }
}
