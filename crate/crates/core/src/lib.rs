//! Cross-modal point-cloud domain adaptation: a multi-view depth-image
//! teacher and a point-patch student share one partially frozen
//! transformer trunk, trained with online distillation, masked patch
//! reconstruction and self-paced pseudo-labelling.

pub mod autograd;
pub mod config;
pub mod container;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod layers;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod projection;
pub mod reconstruct;
pub mod rng;
pub mod selftrain;
pub mod tensor;
pub mod tokenizer;

pub use config::ModelConfig;
pub use encoder::ModelState;
pub use error::{Error, Result};
pub use geometry::{PatchSet, Point, PointCloud};
pub use tensor::Tensor;
