//! Simulated parameter-server training with overlapped communication.

pub mod cluster;
pub mod depengine;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod simnet;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DenseTensor, ParamKey, ParamStore};
