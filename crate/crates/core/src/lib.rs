//! Training-free slicing for deformable attention inference, with a hardware
//! cost model and a bi-objective search over slice configurations.

pub mod attention;
pub mod cost;
pub mod divergence;
mod error;
pub mod format;
pub mod search;
pub mod slicer;
pub mod tensor;

pub use error::{Error, Result};
pub use slicer::SliceConfig;
pub use tensor::Tensor;
