//! Topology-preserving labeling of coronary artery segments.
//!
//! The pipeline extracts vessel trees from masks or precomputed centerlines,
//! splits them into segments, learns segment features with a transformer over
//! each segment's points followed by graph convolution over the segment tree,
//! and labels connected segment *pairs* against a fixed set of
//! anatomy-derived connection templates.

pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod skeleton;
pub mod synth;
pub mod topology;
pub mod train;
pub mod tree;
pub mod volume;

pub use error::{Error, Result};
