//! Point-level region contrast pre-training.
//!
//! Two augmented views of an image are encoded by a base encoder and its
//! momentum copy. Points sampled inside shared regions are contrasted across
//! views, and the momentum encoder's point affinities are distilled into the
//! base encoder. See the crate README for the command-line workflow.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod seed;
pub mod sweep;
pub mod training;

pub use error::{Error, Result};
