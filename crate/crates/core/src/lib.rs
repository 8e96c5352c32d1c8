//! Full-image compressive sensing.
//!
//! Scenes are measured by a strided, overlapping convolution, recovered by a
//! transposed convolution followed by residual refinement, and the whole
//! system is trained end to end under either a pixel-space or a
//! feature-space (perceptual) squared-error loss.

pub mod cli;
pub mod csmodel;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod netpbm;
pub mod tensorcore;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
