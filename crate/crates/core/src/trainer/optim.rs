use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine decay reaching `min_lr` on the
/// final epoch. Updated once per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub total_epochs: usize,
}

impl LrSchedule {
    /// 5 warmup epochs to 1e-3, cosine to 1e-6 over 100 epochs.
    pub fn full_stage1() -> Self {
        Self {
            warmup_epochs: 5,
            peak_lr: 1e-3,
            min_lr: 1e-6,
            total_epochs: 100,
        }
    }

    /// No warmup, 0.1 decaying to 1e-6 over 10 epochs.
    pub fn full_stage2() -> Self {
        Self {
            warmup_epochs: 0,
            peak_lr: 0.1,
            min_lr: 1e-6,
            total_epochs: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            return Err(Error::invalid(format!(
                "warmup_epochs {} must be below total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.min_lr >= 0.0) || !(self.min_lr <= self.peak_lr) || !self.peak_lr.is_finite() {
            return Err(Error::invalid(format!(
                "need 0 <= min_lr <= peak_lr, got {} and {}",
                self.min_lr, self.peak_lr
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::invalid(format!(
                "epoch {epoch} outside a {}-epoch schedule",
                self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            // Fraction first, so the last warmup epoch gives peak_lr exactly.
            return Ok(self.peak_lr * ((epoch + 1) as f64 / self.warmup_epochs as f64));
        }
        let t = epoch - self.warmup_epochs;
        let span = self.total_epochs - self.warmup_epochs - 1;
        // Both cosine endpoints are returned exactly rather than computed.
        if t == span {
            return Ok(self.min_lr);
        }
        if t == 0 {
            return Ok(self.peak_lr);
        }
        let cos = (std::f64::consts::PI * t as f64 / span as f64).cos();
        Ok(self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + cos))
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> Result<f64> {
    schedule.lr_at(epoch)
}

/// Momentum SGD with L2 weight decay folded into the gradient:
/// `g' = g + wd·w; v ← μ·v + g'; w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// Update one named tensor in place. Velocity state is keyed by name.
    pub fn step(&mut self, name: &str, w: &mut Tensor, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != w.numel() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: w.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name} contains {bad}"
            )));
        }
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.cfg;
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = momentum * *vi + gi + weight_decay * *wi;
            *wi -= lr * *vi;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = LrSchedule::full_stage1();
        assert_eq!(s.lr_at(0).unwrap(), 1e-3 / 5.0);
        assert_eq!(s.lr_at(5).unwrap(), 1e-3);
        assert_eq!(s.lr_at(99).unwrap(), 1e-6);
        assert!(s.lr_at(100).is_err());
        let s = LrSchedule {
            warmup_epochs: 2,
            peak_lr: 0.5,
            min_lr: 0.1,
            total_epochs: 13,
        };
        assert!((s.lr_at(2 + 5).unwrap() - 0.3).abs() < 1e-12);
        let s2 = LrSchedule::full_stage2();
        assert_eq!(s2.lr_at(0).unwrap(), 0.1);
        assert_eq!(s2.lr_at(9).unwrap(), 1e-6);
        assert!(LrSchedule {
            warmup_epochs: 3,
            ..LrSchedule::full_stage2()
        }
        .validate()
        .is_ok());
        assert!(LrSchedule {
            warmup_epochs: 10,
            ..LrSchedule::full_stage2()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn sgd_examples() {
        let w0 = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut w = w0.clone();
        let mut opt = Sgd::new(SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        });
        opt.step("w", &mut w, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(w, w0);

        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.0,
            weight_decay: 0.01,
            batch_size: 32,
        });
        opt.step("w", &mut w, &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(
            w.data(),
            &[1.0 * (1.0 - 0.5 * 0.01), -2.0 * (1.0 - 0.5 * 0.01)]
        );

        let mut w = Tensor::zeros(&[1]);
        let mut opt = Sgd::new(SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        });
        opt.step("w", &mut w, &[2.0], 0.1).unwrap();
        assert!((w.data()[0] + 0.2).abs() < 1e-15);
        opt.step("w", &mut w, &[2.0], 0.1).unwrap();
        // v₂ = 0.9·g + g = 1.9g, total −lr·g·(1 + 1.9).
        assert!((w.data()[0] + 0.1 * 2.0 * 2.9).abs() < 1e-15);

        let err = opt
            .step("head.weight", &mut w, &[f64::NAN], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("head.weight"));
    }
}
