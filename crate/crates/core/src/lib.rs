//! Structured filter pruning for residual CNNs driven by learned per-filter
//! scores.
//!
//! A small projection per convolution maps that layer's filter weights to one
//! score per filter. Scores multiply feature maps during training and an L1
//! penalty on them, weighted by each layer's compute, pushes filters towards
//! removal. Filters whose score falls below one half are physically removed
//! by [`surgery`].

pub mod analysis;
pub mod data;
pub mod error;
pub mod graph;
pub mod nn;
pub mod objective;
pub mod pruner;
pub mod schedule;
pub mod surgery;
pub mod verify;
pub mod zoo;

pub use error::{Error, Result};
