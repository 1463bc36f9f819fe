use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub total_steps: u64,
    pub warmup_ratio: f64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, total_steps: u64, warmup_ratio: f64) -> Result<Self> {
        if total_steps == 0 {
            bail!(Argument, "total_steps must be positive");
        }
        if !(0.0..=1.0).contains(&warmup_ratio) {
            bail!(Argument, "warmup_ratio {warmup_ratio} not in [0, 1]");
        }
        if !(peak_lr >= 0.0) {
            bail!(Argument, "peak_lr {peak_lr} must be non-negative");
        }
        Ok(Self {
            peak_lr,
            total_steps,
            warmup_ratio,
        })
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total_steps as f64).round() as u64
    }

    /// Multiplier in [0, 1] applied to the peak rate at `step`.
    pub fn factor(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            bail!(Argument, "step {step} outside 0..={}", self.total_steps);
        }
        let warmup = self.warmup_steps();
        Ok(if step < warmup {
            step as f64 / warmup as f64
        } else if warmup == self.total_steps {
            1.0
        } else {
            (self.total_steps - step) as f64 / (self.total_steps - warmup) as f64
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        Ok(self.peak_lr * self.factor(step)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_peak_and_endpoints() {
        let s = LrSchedule::new(5e-5, 100_000, 0.1).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(10_000).unwrap(), 5e-5);
        assert_eq!(s.lr_at(100_000).unwrap(), 0.0);
        assert!((s.lr_at(55_000).unwrap() - 2.5e-5).abs() < 1e-18);
        assert!((s.lr_at(5_000).unwrap() - 2.5e-5).abs() < 1e-18);
        assert!(s.lr_at(100_001).is_err());
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let s = LrSchedule::new(1.0, 10, 0.0).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 1.0);
        assert_eq!(s.lr_at(10).unwrap(), 0.0);
    }

    #[test]
    fn invalid_construction() {
        assert!(LrSchedule::new(1.0, 0, 0.1).is_err());
        assert!(LrSchedule::new(1.0, 10, 1.5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn piecewise_linear_continuous_non_negative(total in 1u64..5000, ratio in 0.0f64..=1.0) {
            let s = LrSchedule::new(2.0, total, ratio).unwrap();
            let mut prev = s.lr_at(0).unwrap();
            let w = s.warmup_steps();
            let shortest = [w, total - w].into_iter().filter(|&n| n > 0).min().unwrap();
            let max_jump = 2.0 / shortest as f64;
            for step in 1..=total {
                let lr = s.lr_at(step).unwrap();
                proptest::prop_assert!(lr >= 0.0 && lr <= 2.0 + 1e-12);
                proptest::prop_assert!((lr - prev).abs() <= max_jump + 1e-9);
                prev = lr;
            }
        }
    }
}
