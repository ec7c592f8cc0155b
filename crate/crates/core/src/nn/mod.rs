//! Shape-parametric W-Net with manual reverse-mode differentiation and
//! its alternating trainer.

pub mod checkpoint;
pub mod layers;
pub mod real;
pub mod train;
pub mod unet;
pub mod wnet;

pub use checkpoint::Checkpoint;
pub use layers::{Batch, Param};
pub use real::Real;
pub use train::{TrainConfig, TraceRow, Trainer};
pub use wnet::{WNet, WNetConfig};
