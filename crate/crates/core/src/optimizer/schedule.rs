//! Flat + cosine-anneal learning-rate curve: constant at `base_lr` for the
//! first `flat_fraction` of training, then a half cosine down to `final_lr`
//! reached exactly on the last step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub total_steps: usize,
    pub flat_fraction: f64,
    pub final_lr: f64,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.flat_fraction > 0.0 && self.flat_fraction < 1.0) {
            return Err(Error::Config(format!(
                "flat_fraction must lie in (0, 1), got {}",
                self.flat_fraction
            )));
        }
        if !(self.base_lr > 0.0) || self.final_lr < 0.0 || self.final_lr > self.base_lr {
            return Err(Error::Config(format!(
                "need base_lr > 0 and 0 <= final_lr <= base_lr, got {} / {}",
                self.base_lr, self.final_lr
            )));
        }
        Ok(())
    }

    /// First step of the anneal phase: the smallest step not below
    /// `flat_fraction * total_steps`.
    pub fn anneal_start(&self) -> usize {
        (self.flat_fraction * self.total_steps as f64).ceil() as usize
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        flat_cos_lr(step, self)
    }
}

pub fn flat_cos_lr(step: usize, spec: &ScheduleSpec) -> Result<f64> {
    if step >= spec.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside schedule of {} steps",
            spec.total_steps
        )));
    }
    let start = spec.anneal_start();
    if step < start {
        return Ok(spec.base_lr);
    }
    let last = spec.total_steps - 1;
    let u = if last > start {
        (step - start) as f64 / (last - start) as f64
    } else {
        1.0
    };
    Ok(spec.final_lr
        + (spec.base_lr - spec.final_lr) * (1.0 + (std::f64::consts::PI * u).cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(total: usize) -> ScheduleSpec {
        ScheduleSpec {
            base_lr: 1e-3,
            total_steps: total,
            flat_fraction: 0.75,
            final_lr: 0.0,
        }
    }

    #[test]
    fn flat_then_anneal() {
        let s = spec(1000);
        assert_eq!(s.lr(0).unwrap(), 1e-3);
        assert_eq!(s.lr(749).unwrap(), 1e-3);
        assert!(s.lr(999).unwrap() < 1e-8);
        assert!(s.lr(1000).is_err());
    }

    #[test]
    fn anneal_midpoint_is_half_base() {
        // 1004 steps: anneal runs 753..=1003, midpoint at step 878.
        let s = spec(1004);
        assert_eq!(s.anneal_start(), 753);
        assert!((s.lr(878).unwrap() - 5e-4).abs() < 1e-9);
    }

    #[test]
    fn non_increasing_and_continuous() {
        for total in [1, 2, 3, 4, 10, 57, 1000] {
            let s = spec(total);
            let lrs: Vec<f64> = (0..total).map(|i| s.lr(i).unwrap()).collect();
            assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        }
        let s = spec(1000);
        let b = s.anneal_start();
        assert!((s.lr(b).unwrap() - s.lr(b - 1).unwrap()).abs() < 1e-5);
        assert!((s.lr(b + 1).unwrap() - s.lr(b).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn validation() {
        let mut s = spec(10);
        s.flat_fraction = 1.0;
        assert!(s.validate().is_err());
        s.flat_fraction = 0.5;
        s.final_lr = 1.0;
        assert!(s.validate().is_err());
        s.final_lr = 0.0;
        assert!(s.validate().is_ok());
    }
}
