//! Multi-frame optical flow by global softmax-expectation matching over
//! transformer-fused features, followed by recurrent local-correlation
//! refinement, with a sliding-window point-tracking extension.
//!
//! The crate bundles the full desk-scale stack: the trainable model
//! ([`model::FlowModel`]), training objectives and loop ([`losses`],
//! [`train`]), synthetic data with analytic ground truth ([`synth`]),
//! evaluation metrics ([`metrics`]), point tracking ([`tracking`]), and
//! flow/image file I/O ([`io`]).

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod matching;
pub mod model;
pub mod nn;
pub mod params;
pub mod refinement;
pub mod error;
pub mod real;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod sampling;
pub mod synth;
pub mod train;
pub mod tracking;
pub mod types;

pub use error::{Error, Result};
pub use real::Real;
pub use types::{CoordinateGrid, FlowField, ImageSequence, ModelConfig, Temperature};
