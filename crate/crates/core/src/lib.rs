//! Core numerics for recurrent stacked-hourglass keypoint localization.
//!
//! * [`tensor`] and [`tape`]: dense channels-first tensors and a reverse-mode
//!   differentiation tape with the handful of operations the network needs.
//! * [`cell`]: the ConvGRU cell and its coordinate-channel variant.
//! * [`hourglass`]: two-stack hourglass with recurrent skip connections.
//! * [`loss`] and [`metrics`]: target heatmaps, sigmoid cross-entropy, argmax
//!   decoding and PCK.
//! * [`checkpoint`]: the `HGCK` parameter file format.

pub mod cell;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod hourglass;
pub mod init;
pub mod loss;
pub mod metrics;
mod real;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
