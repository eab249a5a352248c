//! Concept bottleneck models whose concept heads read disentangled groups of
//! convolutional filters.
//!
//! The pipeline: a small CNN backbone produces feature maps; the pooled
//! responses of one stage are compared pairwise with a shifted Pearson
//! similarity; spectral clustering partitions the filters into groups; a
//! grouping loss pulls filters of a group together and pushes groups apart;
//! each concept is predicted by a logistic head over its group's responses;
//! a linear class head maps concept probabilities to class logits.
//!
//! Everything, down to reverse-mode differentiation, lives in this crate.
//! See the `examples/` directory for one runnable program per capability and
//! the `dcbm` binary for the command-line workflow.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod error;
pub mod eval;
pub mod filter_stats;
pub mod gradcheck;
pub mod grouping;
pub mod heads;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
