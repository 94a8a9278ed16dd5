//! Warmup + cosine learning-rate schedule with geometric layer-wise scaling.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
    /// Rate of the first (input-side) layer.
    pub layer_lr_min: f64,
    /// Rate of the last layer.
    pub layer_lr_max: f64,
    pub n_layers: usize,
    pub head_lr: f64,
}

impl Default for LrSchedule {
    /// Fine-tuning recipe for a 24-block backbone: 1.25e-6 at the bottom,
    /// 1e-5 at the top, 3e-4 for the embedding head, 1000 warmup steps.
    fn default() -> Self {
        Self {
            warmup_steps: 1000,
            total_steps: 10_000,
            peak_lr: 1.0e-5,
            layer_lr_min: 1.25e-6,
            layer_lr_max: 1.0e-5,
            n_layers: 24,
            head_lr: 3.0e-4,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds total {}",
                self.warmup_steps, self.total_steps
            )));
        }
        for (name, v) in [
            ("peak_lr", self.peak_lr),
            ("layer_lr_min", self.layer_lr_min),
            ("layer_lr_max", self.layer_lr_max),
            ("head_lr", self.head_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        Ok(())
    }

    /// `lr_at_step(t) / peak_lr`, in `[0, 1]`.
    pub fn factor(&self, step: usize) -> Result<f64> {
        Ok(lr_at_step(step, self)? / self.peak_lr)
    }
}

/// Linear warmup to `peak_lr`, then half-cosine decay to 0 at `total_steps`.
pub fn lr_at_step(step: usize, sched: &LrSchedule) -> Result<f64> {
    if step > sched.total_steps {
        return Err(Error::OutOfRange(format!(
            "step {step} beyond total {}",
            sched.total_steps
        )));
    }
    if step < sched.warmup_steps {
        return Ok(sched.peak_lr * step as f64 / sched.warmup_steps as f64);
    }
    let decay = sched.total_steps - sched.warmup_steps;
    if decay == 0 {
        return Ok(sched.peak_lr);
    }
    let progress = (step - sched.warmup_steps) as f64 / decay as f64;
    Ok(sched.peak_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Geometric interpolation from `layer_lr_min` (layer 0) to `layer_lr_max`
/// (layer `n_layers - 1`).
pub fn layerwise_lr(layer: usize, sched: &LrSchedule) -> Result<f64> {
    if layer >= sched.n_layers {
        return Err(Error::OutOfRange(format!("layer {layer} of {}", sched.n_layers)));
    }
    if sched.n_layers == 1 {
        return Ok(sched.layer_lr_max);
    }
    let frac = layer as f64 / (sched.n_layers - 1) as f64;
    Ok(sched.layer_lr_min * (sched.layer_lr_max / sched.layer_lr_min).powf(frac))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_and_decay() {
        let s = LrSchedule::default();
        assert_eq!(lr_at_step(0, &s).unwrap(), 0.0);
        assert_eq!(lr_at_step(1000, &s).unwrap(), 1.0e-5);
        assert!((lr_at_step(500, &s).unwrap() - 0.5e-5).abs() < 1e-20);
        let mid = (1000 + 10_000) / 2;
        assert!((lr_at_step(mid, &s).unwrap() - 0.5e-5).abs() < 1e-18);
        assert!(lr_at_step(10_000, &s).unwrap().abs() < 1e-20);
        assert!(lr_at_step(10_001, &s).is_err());
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let s = LrSchedule::default();
        let before = lr_at_step(999, &s).unwrap();
        let at = lr_at_step(1000, &s).unwrap();
        let after = lr_at_step(1001, &s).unwrap();
        assert!((at - before) < 2e-8 && (at - after) < 2e-8);
    }

    #[test]
    fn layer_rates() {
        let s = LrSchedule::default();
        assert_eq!(layerwise_lr(0, &s).unwrap(), 1.25e-6);
        assert!((layerwise_lr(23, &s).unwrap() - 1.0e-5).abs() < 1e-20);
        assert!(layerwise_lr(24, &s).is_err());
        let three = LrSchedule {
            n_layers: 3,
            ..s.clone()
        };
        let mid = layerwise_lr(1, &three).unwrap();
        assert!((mid - (1.25e-6f64 * 1.0e-5).sqrt()).abs() < 1e-18);
        assert!((mid - 3.536e-6).abs() < 1e-9);
        let one = LrSchedule { n_layers: 1, ..s };
        assert_eq!(layerwise_lr(0, &one).unwrap(), 1.0e-5);
    }

    #[test]
    fn validation() {
        assert!(LrSchedule::default().validate().is_ok());
        let bad = LrSchedule {
            warmup_steps: 20,
            total_steps: 10,
            ..LrSchedule::default()
        };
        assert!(bad.validate().is_err());
        let bad = LrSchedule {
            head_lr: 0.0,
            ..LrSchedule::default()
        };
        assert!(bad.validate().is_err());
    }
}
