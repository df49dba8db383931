pub mod checkpoint;
pub mod config;
pub mod container;
pub mod datagen;
pub mod dilr;
pub mod distill;
pub mod eprl;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod ops;
pub mod rng;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;
