//! Spatio-temporal consistency regularization for self-supervised video
//! representation learning, built on a small reverse-mode autodiff engine.

pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod clip;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod transform;
pub mod viz;

pub use clip::VideoClip;
pub use config::RunConfig;
pub use error::{Result, StcrError};
pub use model::{BackboneConfig, ModelParams};
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainState};
pub use transform::TransformId;
