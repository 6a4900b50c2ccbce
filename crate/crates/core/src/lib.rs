//! Lightweight prompt-guided image super-resolution: a small autodiff
//! engine, the network and its attention blocks, training, image I/O,
//! quality metrics and a complexity analyzer.

pub mod analyzer;
pub mod attention;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tensor, Var, Tape};
