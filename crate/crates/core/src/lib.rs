//! Landmark discovery through differentiable thin-plate-spline registration.
//!
//! An encoder predicts corresponding landmarks on a source and a target
//! image; a thin-plate spline through those landmarks warps the source onto
//! the target, and the registration loss (plus a conditioning penalty on the
//! spline system) trains the encoder end to end. The landmarks it learns are
//! then usable as shape descriptors.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod gradients;
pub mod image;
pub mod landmarks;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod pruner;
pub mod shape_stats;
pub mod synth;
pub mod trainer;
pub mod tps;

pub use error::{Error, Result};
pub use image::{Image, Mask};
pub use landmarks::LandmarkSet;
