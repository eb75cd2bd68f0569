//! Online continual learning with a contrastive vision transformer.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod model;
pub mod replay;
pub mod tensor;
pub mod trainer;

pub use error::{CvtError, Result};
pub use tensor::Tensor;
