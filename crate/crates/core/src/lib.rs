pub mod augment;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod optimizer;
pub mod overlay;
pub mod preprocess;
pub mod protocol;
pub mod synthetic;
pub mod unet;
pub mod volume_io;

pub use error::{Error, Result};
