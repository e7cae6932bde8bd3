//! Track-then-label consensus for multi-view object detections, plus a small
//! referring-field trainer that consumes the consensus output.
//!
//! The stages, in pipeline order:
//!
//! * [`synth`] builds seeded synthetic scenes and corrupts their labels/masks.
//! * [`association`] groups detections into trajectories.
//! * [`consensus`] clusters synonymous labels and votes one identity per
//!   trajectory.
//! * [`keyframe`] picks a keyframe per trajectory and attaches descriptions.
//! * [`field`] trains toy Gaussian referring features on the result.
//! * [`eval`] scores label accuracy and rendered-mask IoU.
//! * [`pipeline`] runs the stages as file-based batch jobs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod consensus;
pub mod data;
pub mod error;
pub mod eval;
pub mod field;
pub mod keyframe;
pub mod mask;
pub mod pipeline;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
