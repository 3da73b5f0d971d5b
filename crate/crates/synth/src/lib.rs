//! Synthetic keypoint sequences: procedural vehicle-like meshes seen by a
//! smoothly orbiting camera, rendered over procedural backgrounds, with
//! keypoint visibility taken from the depth buffer.

pub mod background;
pub mod camera;
pub mod config;
pub mod dataset;
pub mod geometry;
pub mod raster;

mod error;

pub use error::{Error, Result};
