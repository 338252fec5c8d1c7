//! Hybrid graph neural network for joint crowd counting and localization.
//!
//! The crate is self-contained: a dense f64 tensor core with reverse-mode
//! automatic differentiation, the neural operations the model is composed
//! of, the two-branch dilated backbone, the hybrid message-passing graph,
//! synthetic crowd-scene data with ground-truth map generation, and a
//! deterministic training/evaluation harness.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod dfl;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod init;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod ppm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{finite_diff_grad, max_relative_error, GradientMap, Tape, Tensor, TensorId};
