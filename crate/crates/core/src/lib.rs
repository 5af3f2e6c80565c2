//! Frame interpolation for 3D volume sequences by fitting a continuous motion
//! model to a pair of frames.
//!
//! A coordinate network (or a control-point grid) describes either a velocity
//! field, integrated with forward Euler, or a plain displacement field.
//! Intermediate frames are synthesized by backward warping both endpoints and
//! blending them.

pub mod error;
pub mod flow;
pub mod inr;
pub mod interpolate;
pub mod metrics;
pub mod objective;
pub mod optimizer;
pub mod parallel;
pub mod phantom;
pub mod sampler;
pub mod volume;

pub use error::{Error, Result};
