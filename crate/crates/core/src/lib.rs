//! Building blocks for working with sparse high-dimensional data: CSR matrices
//! and kernels, random projection schemes, an out-of-core projection engine,
//! embedding quality metrics, filter feature selection, synthetic dataset
//! generation, and a small feed-forward network trainer with projection layers.

pub mod alloc_track;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod schemes;
pub mod select;
pub mod sparse;
pub mod synth;

pub use error::{Error, Result};
