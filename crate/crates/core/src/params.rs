//! Named trainable parameter storage.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{FusionerError, Result};

/// Standard deviation of the truncated-normal weight initialiser.
pub const INIT_STD: f64 = 0.02;

/// Ordered map from parameter name to matrix. Iteration order is the
/// lexicographic name order, which fixes serialisation and update order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Mat::zeros(v.dim())))
                .collect(),
        }
    }

    /// `self += other * scale`, matching entries by name.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for (name, value) in self.entries.iter_mut() {
            if let Some(o) = other.entries.get(name) {
                value.scaled_add(scale, o);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// L2 norm of every entry, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|x| x * x).sum::<f64>().sqrt()))
            .collect()
    }

    /// Places every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Places every parameter on the tape as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }
}

/// Parameters of a [`ParamSet`] as tape variables.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| FusionerError::invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let normal = Normal::new(0.0, std).expect("positive std");
    Mat::from_shape_fn((rows, cols), |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// Adds `{prefix}.w` (`fan_in × fan_out`, truncated normal) and `{prefix}.b`
/// (zeros) to `set`.
pub fn init_linear<R: Rng + ?Sized>(set: &mut ParamSet, rng: &mut R, prefix: &str, fan_in: usize, fan_out: usize) {
    set.insert(format!("{prefix}.w"), truncated_normal(rng, fan_in, fan_out, INIT_STD));
    set.insert(format!("{prefix}.b"), Mat::zeros((1, fan_out)));
}

/// Looks up `{prefix}.w`/`{prefix}.b` and applies `x·w + b`.
pub fn linear(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.w"))?;
    let b = bound.var(&format!("{prefix}.b"))?;
    let (_, cols) = tape.shape(x);
    let (fan_in, _) = tape.shape(w);
    if cols != fan_in {
        return Err(FusionerError::dim(format!(
            "`{prefix}` expects width {fan_in}, got {cols}"
        )));
    }
    Ok(tape.affine(x, w, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = truncated_normal(&mut rng, 50, 50, 0.02);
        assert!(m.iter().all(|v| v.abs() <= 0.04));
        let mean = m.sum() / m.len() as f64;
        assert!(mean.abs() < 0.002);
    }

    #[test]
    fn linear_rejects_width_mismatch() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_linear(&mut set, &mut rng, "p", 3, 2);
        let mut tape = Tape::new();
        let bound = set.bind(&mut tape);
        let x = tape.constant(Mat::zeros((1, 4)));
        assert!(matches!(
            linear(&mut tape, &bound, "p", x),
            Err(FusionerError::Dimension(_))
        ));
    }
}
