// Index-based loops are the clearest way to express the strided kernels
// in this crate; the iterator rewrites clippy suggests obscure them.
#![allow(clippy::needless_range_loop, clippy::manual_is_multiple_of)]

//! Saliency attribution for a small trainable CNN: optimized feature-map
//! masking plus the classic CAM-family baselines, with the full evaluation
//! suite (drop/gain/increase, insertion/deletion, localization metrics,
//! parameter-randomization sanity checks) and a reproducible experiment
//! harness.

pub mod dataset;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
