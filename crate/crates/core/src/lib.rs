pub mod analysis;
pub mod bench;
pub mod blocks;
pub mod check;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod optim;
pub mod param;
pub mod tensor;
pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
