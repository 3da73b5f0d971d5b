//! Training, evaluation and benchmarking for the recurrent hourglass.

pub mod bench;
pub mod config;
pub mod eval;
mod error;
pub mod optim;
pub mod train;

pub use error::{Error, Result};
