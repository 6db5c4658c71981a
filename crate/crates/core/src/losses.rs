//! Composite segmentation loss: soft Dice + focal + cross-entropy.
//!
//! Logits are `(B, 2, H, W)` with class 1 = prostate; targets are `(B, H, W)`
//! binary labels. All arithmetic is carried out in `f64`.

use ndarray::{Array4, ArrayView3, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_dice: f64,
    pub w_focal: f64,
    pub w_ce: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_dice: 1.0,
            w_focal: 1.0,
            w_ce: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            dice_eps: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_dice, self.w_focal, self.w_ce];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {w:?}")));
        }
        if !w.iter().any(|v| *v > 0.0) {
            return Err(Error::Config("at least one loss weight must be > 0".into()));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_alpha > 0.0 && self.dice_eps > 0.0) {
            return Err(Error::Config(format!(
                "focal gamma must be >= 0, alpha and dice epsilon > 0 (got {}, {}, {})",
                self.focal_gamma, self.focal_alpha, self.dice_eps
            )));
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub dice: f64,
    pub focal: f64,
    pub ce: f64,
    pub total: f64,
}

fn check_target(logits_dim: (usize, usize, usize, usize), target: &ArrayView3<u8>) -> Result<()> {
    let (b, c, h, w) = logits_dim;
    if c != 2 {
        return Err(Error::Shape(format!("expected 2 class channels, got {c}")));
    }
    if target.dim() != (b, h, w) {
        return Err(Error::Shape(format!(
            "target dims {:?} do not match logits (B, H, W) = {:?}",
            target.dim(),
            (b, h, w)
        )));
    }
    if target.iter().any(|&t| t > 1) {
        return Err(Error::Shape("target labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Log-softmax over the class axis.
pub fn log_softmax(logits: &ArrayView4<f64>) -> Array4<f64> {
    let mut out = logits.to_owned();
    for mut sample in out.outer_iter_mut() {
        let (z0, z1) = sample.view_mut().split_at(Axis(0), 1);
        Zip::from(z0).and(z1).for_each(|a, b| {
            let m = a.max(*b);
            let lse = m + ((*a - m).exp() + (*b - m).exp()).ln();
            *a -= lse;
            *b -= lse;
        });
    }
    out
}

pub fn softmax(logits: &ArrayView4<f64>) -> Array4<f64> {
    log_softmax(logits).mapv(f64::exp)
}

/// Soft Dice loss, `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`, summed
/// jointly over the whole batch.
pub fn dice_loss(probs: &ArrayView3<f64>, target: &ArrayView3<u8>, eps: f64) -> Result<f64> {
    if probs.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "dice inputs differ: {:?} vs {:?}",
            probs.dim(),
            target.dim()
        )));
    }
    let (mut inter, mut sum_p, mut sum_g) = (0.0, 0.0, 0.0);
    Zip::from(probs).and(target).for_each(|&p, &g| {
        let g = g as f64;
        inter += p * g;
        sum_p += p;
        sum_g += g;
    });
    Ok(1.0 - (2.0 * inter + eps) / (sum_p + sum_g + eps))
}

/// Mean over pixels of `-alpha (1 - p_t)^gamma ln p_t`.
pub fn focal_loss(probs: &ArrayView4<f64>, target: &ArrayView3<u8>, gamma: f64, alpha: f64) -> Result<f64> {
    check_target(probs.dim(), target)?;
    let log_p = probs.mapv(f64::ln);
    Ok(focal_from_log(&log_p.view(), target, gamma, alpha))
}

fn focal_from_log(log_p: &ArrayView4<f64>, target: &ArrayView3<u8>, gamma: f64, alpha: f64) -> f64 {
    let n = target.len() as f64;
    let mut total = 0.0;
    for (b, lp) in log_p.outer_iter().enumerate() {
        Zip::indexed(target.index_axis(Axis(0), b)).for_each(|(y, x), &t| {
            let lpt = lp[[t as usize, y, x]];
            let q = 1.0 - lpt.exp();
            let mod_ = if gamma == 0.0 { 1.0 } else { q.max(0.0).powf(gamma) };
            total -= alpha * mod_ * lpt;
        });
    }
    total / n
}

/// Mean pixelwise negative log-likelihood after softmax.
pub fn cross_entropy(logits: &ArrayView4<f64>, target: &ArrayView3<u8>) -> Result<f64> {
    check_target(logits.dim(), target)?;
    let log_p = log_softmax(logits);
    Ok(ce_from_log(&log_p.view(), target))
}

fn ce_from_log(log_p: &ArrayView4<f64>, target: &ArrayView3<u8>) -> f64 {
    let mut total = 0.0;
    for (b, lp) in log_p.outer_iter().enumerate() {
        Zip::indexed(target.index_axis(Axis(0), b)).for_each(|(y, x), &t| {
            total -= lp[[t as usize, y, x]];
        });
    }
    total / target.len() as f64
}

/// Weighted sum of the three terms.
pub fn combined_loss(logits: &ArrayView4<f64>, target: &ArrayView3<u8>, w: &LossWeights) -> Result<LossParts> {
    check_target(logits.dim(), target)?;
    let log_p = log_softmax(logits);
    let fg = log_p.index_axis(Axis(1), 1).mapv(f64::exp);
    let dice = dice_loss(&fg.view(), target, w.dice_eps)?;
    let focal = focal_from_log(&log_p.view(), target, w.focal_gamma, w.focal_alpha);
    let ce = ce_from_log(&log_p.view(), target);
    Ok(LossParts {
        dice,
        focal,
        ce,
        total: w.w_dice * dice + w.w_focal * focal + w.w_ce * ce,
    })
}

/// Loss value and its gradient with respect to the logits.
pub fn combined_loss_grad(
    logits: &ArrayView4<f64>,
    target: &ArrayView3<u8>,
    w: &LossWeights,
) -> Result<(LossParts, Array4<f64>)> {
    let parts = combined_loss(logits, target, w)?;
    let log_p = log_softmax(logits);
    let n = target.len() as f64;

    let (mut inter, mut sum_p, mut sum_g) = (0.0, 0.0, 0.0);
    for (b, lp) in log_p.outer_iter().enumerate() {
        Zip::from(lp.index_axis(Axis(0), 1))
            .and(target.index_axis(Axis(0), b))
            .for_each(|&l1, &g| {
                let p = l1.exp();
                inter += p * g as f64;
                sum_p += p;
                sum_g += g as f64;
            });
    }
    let denom = sum_p + sum_g + w.dice_eps;
    let numer = 2.0 * inter + w.dice_eps;
    let (gamma, alpha) = (w.focal_gamma, w.focal_alpha);

    let mut grad = Array4::<f64>::zeros(logits.dim());
    for (b, lp) in log_p.outer_iter().enumerate() {
        let tgt = target.index_axis(Axis(0), b);
        let mut gb = grad.index_axis_mut(Axis(0), b);
        let (_, _, h, wd) = logits.dim();
        for y in 0..h {
            for x in 0..wd {
                let t = tgt[[y, x]] as usize;
                let lp_c = [lp[[0, y, x]], lp[[1, y, x]]];
                let p = [lp_c[0].exp(), lp_c[1].exp()];
                let g = t as f64;

                // Dice acts on p1; dp1/dz1 = p0 p1 = -dp1/dz0.
                let d_dice_dp1 = -(2.0 * g * denom - numer) / (denom * denom);
                let d_dice_dz1 = d_dice_dp1 * p[0] * p[1];

                let pt = p[t];
                let q = 1.0 - pt;
                let focal_coef = {
                    let qg = if gamma == 0.0 { 1.0 } else { q.max(0.0).powf(gamma) };
                    let first = if gamma == 0.0 || q <= 0.0 {
                        0.0
                    } else {
                        gamma * q.powf(gamma - 1.0) * pt * lp_c[t]
                    };
                    alpha * (first - qg) / n
                };

                for c in 0..2 {
                    let delta = f64::from(c == t);
                    let ce = (p[c] - delta) / n;
                    let focal = focal_coef * (delta - p[c]);
                    let dice = if c == 1 { d_dice_dz1 } else { -d_dice_dz1 };
                    gb[[c, y, x]] = w.w_dice * dice + w.w_focal * focal + w.w_ce * ce;
                }
            }
        }
    }
    Ok((parts, grad))
}
