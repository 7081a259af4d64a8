pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod kernels;
pub mod metrics;
pub mod render;
pub mod sampling;
pub mod selfcheck;

pub use error::{Error, Result};
