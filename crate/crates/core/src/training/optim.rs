//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

pub struct AdamW {
    pub config: AdamWConfig,
    m: ParamSet,
    v: ParamSet,
    t: i32,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// `p ← p − lr·(m̂/(√v̂ + ε) + λp)`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            let v = self.v.get_mut(name).expect("moment for every parameter");
            v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let (m, v) = (&self.m.get(name).unwrap(), &self.v.get(name).unwrap());
            ndarray::Zip::from(p).and(*m).and(*v).for_each(|p, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + c.eps);
                *p -= lr * (update + c.weight_decay * *p);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // After one step m̂ = g and v̂ = g², so the update is g/(|g|+ε) ≈ sign(g).
        let mut p = ParamSet::new();
        p.insert("w", array![[1.0, -2.0]]);
        let mut g = ParamSet::new();
        g.insert("w", array![[0.5, -3.0]]);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
        );
        opt.step(&mut p, &g, 0.1);
        let w = p.get("w").unwrap();
        assert!((w[[0, 0]] - 0.9).abs() < 1e-7);
        assert!((w[[0, 1]] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = ParamSet::new();
        p.insert("w", array![[2.0]]);
        let mut g = ParamSet::new();
        g.insert("w", array![[0.0]]);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
            &p,
        );
        opt.step(&mut p, &g, 0.1);
        assert!((p.get("w").unwrap()[[0, 0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }
}
