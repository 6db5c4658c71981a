//! Lookahead: slow weights that periodically pull toward the fast weights
//! produced by an inner optimiser, after which the fast weights restart
//! from the slow ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookaheadState {
    pub slow: Vec<f32>,
    /// Sync period in inner steps.
    pub k: u64,
    /// Interpolation factor toward the fast weights.
    pub alpha: f64,
    /// Inner steps seen so far.
    pub counter: u64,
}

impl LookaheadState {
    /// Slow weights start as a copy of the initial fast weights.
    pub fn new(initial: &[f32], k: u64, alpha: f64) -> Result<Self> {
        if k == 0 || !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "lookahead needs k >= 1 and alpha in [0, 1], got k={k} alpha={alpha}"
            )));
        }
        Ok(LookaheadState {
            slow: initial.to_vec(),
            k,
            alpha,
            counter: 0,
        })
    }

    /// Call once after every inner step. Every `k`-th call moves the slow
    /// weights `alpha` of the way toward `fast` and copies them back into
    /// `fast`. Returns whether a sync happened.
    pub fn sync(&mut self, fast: &mut [f32]) -> Result<bool> {
        if fast.len() != self.slow.len() {
            return Err(Error::Shape(format!(
                "lookahead holds {} slow weights, got {} fast weights",
                self.slow.len(),
                fast.len()
            )));
        }
        self.counter += 1;
        if self.counter % self.k != 0 {
            return Ok(false);
        }
        // (1 - a) * slow + a * fast: exact at both a = 0 and a = 1.
        let a = self.alpha as f32;
        let keep = 1.0 - a;
        for (s, f) in self.slow.iter_mut().zip(fast.iter_mut()) {
            *s = keep * *s + a * *f;
            *f = *s;
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_interpolation() {
        let mut la = LookaheadState::new(&[0.0], 1, 0.5).unwrap();
        let mut fast = [2.0f32];
        assert!(la.sync(&mut fast).unwrap());
        assert_eq!(la.slow, vec![1.0]);
        assert_eq!(fast, [1.0]);
    }

    #[test]
    fn alpha_one_adopts_fast_weights() {
        let mut la = LookaheadState::new(&[0.3, -7.0], 1, 1.0).unwrap();
        let mut fast = [0.1f32, 5.5];
        la.sync(&mut fast).unwrap();
        assert_eq!(la.slow, vec![0.1, 5.5]);
        assert_eq!(fast, [0.1, 5.5]);
    }

    #[test]
    fn alpha_zero_resets_fast_every_k() {
        let mut la = LookaheadState::new(&[1.0], 3, 0.0).unwrap();
        let mut fast = [1.0f32];
        for step in 1..=9 {
            fast[0] += 10.0;
            let synced = la.sync(&mut fast).unwrap();
            assert_eq!(synced, step % 3 == 0);
            if synced {
                assert_eq!(fast, [1.0]);
            }
            assert_eq!(la.slow, vec![1.0]);
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(LookaheadState::new(&[0.0], 0, 0.5).is_err());
        assert!(LookaheadState::new(&[0.0], 6, 1.5).is_err());
        let mut la = LookaheadState::new(&[0.0], 6, 0.5).unwrap();
        assert!(la.sync(&mut [0.0, 1.0]).is_err());
    }
}
