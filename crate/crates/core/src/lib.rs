//! Metric learning with a graph smoothness loss.
//!
//! Each mini-batch of embeddings becomes a k-nearest-neighbor similarity
//! graph with weights `exp(-alpha * distance)`. The loss is the smoothness of
//! the label signals on that graph, which reduces to the kernel-weighted sum
//! over neighbor pairs with different labels. Training runs on a small
//! reverse-mode autodiff tape over `f64` tensors.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
