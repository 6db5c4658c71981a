//! Rectified Adam, Lookahead, their composition (Ranger), and the flat +
//! cosine learning-rate schedule.
//!
//! All optimisers work on a model's flat `f32` parameter vector.

pub mod lookahead;
pub mod radam;
pub mod ranger;
pub mod schedule;

pub use lookahead::LookaheadState;
pub use radam::{RAdamParams, RAdamState, StepKind, RECTIFY_THRESHOLD};
pub use ranger::{Ranger, RangerParams, RangerStep};
pub use schedule::{flat_cos_lr, ScheduleSpec};
