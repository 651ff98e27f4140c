//! Monocular 3D human pose estimation from 2D keypoint sequences through a
//! bone length / bone direction decomposition.

pub mod camera;
pub mod config;
pub mod dataset;
pub mod direction;
pub mod error;
pub mod length;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod runtime;
pub mod sequence;
pub mod skeleton;
pub mod synth;

pub use error::{Error, Result};
