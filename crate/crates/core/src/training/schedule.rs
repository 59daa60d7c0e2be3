//! Learning-rate schedule: linear warmup from zero, then cosine decay to zero.

use super::TrainConfig;

/// Learning rate for optimizer step `step` (0-based).
///
/// With `W = warmup_epochs · steps_per_epoch` and
/// `T = total_epochs · steps_per_epoch`, the rate rises linearly from 0 at
/// step 0 to `base_lr` at step `W`, then follows `base_lr · ½(1 + cos πt)`
/// with `t = (step − W)/(T − W)`, reaching 0 at step `T` and staying there.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.total_epochs * steps_per_epoch;
    if warmup > 0 && step <= warmup {
        return cfg.base_lr * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        let cfg = TrainConfig {
            warmup_epochs: 10,
            total_epochs: 30,
            ..Default::default()
        };
        assert_eq!(lr_at(0, 5, &cfg), 0.0);
        assert_eq!(lr_at(50, 5, &cfg), 0.001);
        assert!((lr_at(25, 5, &cfg) - 0.0005).abs() < 1e-18);
        assert!((lr_at(100, 5, &cfg) - 0.0005).abs() < 1e-12);
        assert_eq!(lr_at(150, 5, &cfg), 0.0);
        assert_eq!(lr_at(400, 5, &cfg), 0.0);
    }

    #[test]
    fn no_warmup_starts_at_base() {
        let cfg = TrainConfig {
            warmup_epochs: 0,
            total_epochs: 2,
            ..Default::default()
        };
        assert_eq!(lr_at(0, 10, &cfg), cfg.base_lr);
    }
}
