//! Learnable video effects: learn a spatio-temporal effect (melt, bloom,
//! swirl, shrink, ...) from example clips and apply it to still images.
//!
//! The generator never paints pixels. It predicts, for every output pixel and
//! timestep, a small convex-combination kernel over the previous frame, so
//! every output value is a weighted average of real input pixels. Training
//! compares rollouts against example clips with pixel, perceptual, flow, and
//! adversarial losses; all differentiation runs on the in-crate tape
//! ([`tensor::Graph`]).

pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod io;
pub mod losses;
pub mod nn;
pub mod predictor;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
