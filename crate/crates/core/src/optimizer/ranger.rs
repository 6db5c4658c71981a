//! Ranger: Lookahead wrapped around Rectified Adam.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::lookahead::LookaheadState;
use super::radam::{RAdamParams, RAdamState, StepKind};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangerParams {
    pub radam: RAdamParams,
    pub k: u64,
    pub alpha: f64,
}

impl Default for RangerParams {
    fn default() -> Self {
        RangerParams {
            radam: RAdamParams::default(),
            k: 6,
            alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranger {
    pub radam: RAdamState,
    pub lookahead: LookaheadState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangerStep {
    pub kind: StepKind,
    pub synced: bool,
}

impl Ranger {
    pub fn new(initial: &[f32], hyper: RangerParams) -> Result<Self> {
        hyper.radam.validate()?;
        Ok(Ranger {
            radam: RAdamState::new(initial.len(), hyper.radam),
            lookahead: LookaheadState::new(initial, hyper.k, hyper.alpha)?,
        })
    }

    /// RAdam update of the fast weights followed by Lookahead bookkeeping.
    pub fn step(
        &mut self,
        params: &mut [f32],
        grads: &[f32],
        groups: &[(String, Range<usize>)],
        lr: f64,
    ) -> Result<RangerStep> {
        let kind = self.radam.step(params, grads, groups, lr)?;
        let synced = self.lookahead.sync(params)?;
        Ok(RangerStep { kind, synced })
    }
}
