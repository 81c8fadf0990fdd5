pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mining;
pub mod nn;
pub mod noise;
pub mod ssl;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
