pub mod classifier;
pub mod dataset;
pub mod engine;
pub mod entropy;
pub mod error;
pub mod jpeg;
pub mod losses;
pub mod metrics;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};
