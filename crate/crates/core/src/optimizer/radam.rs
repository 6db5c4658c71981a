//! Rectified Adam with decoupled weight decay.
//!
//! While the length of the approximated simple moving average, `rho_t`, is
//! at most 4 the adaptive learning rate has intractable variance and the
//! step falls back to bias-corrected momentum. Beyond that threshold the
//! adaptive step is scaled by the rectification factor `r_t`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `rho_t` must exceed this for the adaptive (rectified) branch.
pub const RECTIFY_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RAdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for RAdamParams {
    fn default() -> Self {
        RAdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl RAdamParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid RAdam hyperparameters {self:?}")))
        }
    }

    /// Maximum length of the approximated SMA, `2 / (1 - beta2) - 1`.
    pub fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    /// `rho_t = rho_inf - 2 t beta2^t / (1 - beta2^t)` for step `t >= 1`.
    pub fn rho(&self, t: u64) -> f64 {
        let b2t = self.beta2.powf(t as f64);
        self.rho_inf() - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Variance rectification factor, defined once `rho_t > 4`.
    pub fn rectification(&self, t: u64) -> Option<f64> {
        let rho_t = self.rho(t);
        if rho_t <= RECTIFY_THRESHOLD {
            return None;
        }
        let rho_inf = self.rho_inf();
        Some(
            (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RAdamState {
    pub hyper: RAdamParams,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepKind {
    /// Un-adapted, bias-corrected momentum step.
    Momentum,
    /// Adaptive step scaled by the rectification factor.
    Rectified { r: f64 },
}

impl RAdamState {
    pub fn new(n_params: usize, hyper: RAdamParams) -> Self {
        RAdamState {
            hyper,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One update of `params` in place. `groups` name parameter ranges for
    /// error reporting; pass an empty slice to treat `params` as one group.
    pub fn step(
        &mut self,
        params: &mut [f32],
        grads: &[f32],
        groups: &[(String, Range<usize>)],
        lr: f64,
    ) -> Result<StepKind> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer state has {} entries, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        check_finite(grads, groups)?;

        self.step += 1;
        let t = self.step;
        let RAdamParams {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hyper;

        if weight_decay != 0.0 {
            let shrink = (1.0 - lr * weight_decay) as f32;
            for p in params.iter_mut() {
                *p *= shrink;
            }
        }

        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grads) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        }

        let bias1 = 1.0 - beta1.powf(t as f64);
        let kind = match self.hyper.rectification(t) {
            Some(r) => {
                let bias2 = 1.0 - beta2.powf(t as f64);
                let step_size = (lr * r / bias1) as f32;
                let inv_bias2 = (1.0 / bias2) as f32;
                let eps = eps as f32;
                for ((p, &m), &v) in params.iter_mut().zip(&self.m).zip(&self.v) {
                    *p -= step_size * m / ((v * inv_bias2).sqrt() + eps);
                }
                StepKind::Rectified { r }
            }
            None => {
                let step_size = (lr / bias1) as f32;
                for (p, &m) in params.iter_mut().zip(&self.m) {
                    *p -= step_size * m;
                }
                StepKind::Momentum
            }
        };
        Ok(kind)
    }
}

fn check_finite(grads: &[f32], groups: &[(String, Range<usize>)]) -> Result<()> {
    if grads.iter().all(|g| g.is_finite()) {
        return Ok(());
    }
    let bad = grads.iter().position(|g| !g.is_finite()).unwrap_or(0);
    let name = groups
        .iter()
        .find(|(_, r)| r.contains(&bad))
        .map(|(n, _)| n.as_str())
        .unwrap_or("params");
    Err(Error::NonFinite(format!(
        "gradient of parameter group `{name}` (index {bad})"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_inf_for_default_beta2() {
        let h = RAdamParams::default();
        assert!((h.rho_inf() - 1999.0).abs() < 1e-9);
    }

    #[test]
    fn first_step_uses_momentum_branch() {
        let h = RAdamParams::default();
        assert!(h.rho(1) <= RECTIFY_THRESHOLD);
        assert!(h.rectification(1).is_none());
        let mut s = RAdamState::new(1, h);
        let mut p = [1.0f32];
        let kind = s.step(&mut p, &[0.5], &[], 0.1).unwrap();
        assert_eq!(kind, StepKind::Momentum);
        // m = 0.05, m_hat = 0.5, p = 1 - 0.1 * 0.5
        assert!((p[0] - 0.95).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_group() {
        let mut s = RAdamState::new(4, RAdamParams::default());
        let mut p = [0.0f32; 4];
        let groups = vec![("enc0.weight".to_string(), 0..2), ("enc0.bias".to_string(), 2..4)];
        let err = s
            .step(&mut p, &[0.0, 0.0, f32::NAN, 0.0], &groups, 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("enc0.bias"), "{err}");
        assert_eq!(s.step, 0);
    }

    #[test]
    fn rejects_bad_lr_and_shapes() {
        let mut s = RAdamState::new(2, RAdamParams::default());
        let mut p = [0.0f32; 2];
        assert!(s.step(&mut p, &[0.0, 0.0], &[], -1e-3).is_err());
        assert!(s.step(&mut p, &[0.0], &[], 1e-3).is_err());
    }
}
