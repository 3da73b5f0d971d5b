//! Xavier (Glorot) uniform initialization.

use rand::Rng;

use crate::tensor::ConvSpec;
use crate::{Real, Tensor};

/// Uniform weights in `±sqrt(6 / (fan_in + fan_out))`, fans counted as
/// channels times kernel area.
pub fn xavier_conv<T: Real, R: Rng + ?Sized>(spec: &ConvSpec, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (spec.fan_in() + spec.fan_out()) as f64).sqrt();
    Tensor::uniform(&spec.weight_shape(), -limit, limit, rng)
}
