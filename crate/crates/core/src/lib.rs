pub mod centroids;
pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod runspec;
pub mod scoring;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
