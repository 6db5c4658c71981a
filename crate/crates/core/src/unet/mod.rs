pub mod checkpoint;
pub mod layers;
pub mod mish;
mod model;
pub mod predict;

pub use checkpoint::Checkpoint;
pub use mish::{mish, mish_grad, softplus};
pub use model::{Activation, ModelSpec, UNet};
pub use predict::predict_mask;
