//! Instance-conditional knowledge distillation for dense detectors, built on
//! a small reverse-mode autodiff engine.

pub mod decoder;
pub mod instance;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pyramid;
pub mod tensor;

use thiserror::Error;

pub use params::{GroupName, ParamError, ParamGroup};
pub use tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("index {index} out of range for {count} entries")]
    Index { index: usize, count: usize },
    #[error("invalid data: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, Error>;
