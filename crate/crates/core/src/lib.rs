pub mod blocks;
pub mod container;
pub mod data;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod params;
pub mod training;

pub use error::{Error, Result};
pub use twostream_autograd::Tensor;
