pub mod cli;
pub mod extractor;
pub mod io;
pub mod losses;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod synthwarp;
pub mod tensor;
pub mod trainer;

pub use tensor::{Scalar, Tensor};
