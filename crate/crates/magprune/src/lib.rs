//! Gradual magnitude pruning toolkit for small transformer encoders.
//!
//! The crate covers the full pipeline: a dense f64 autodiff engine, a
//! configurable BERT-style encoder, magnitude pruning with permanent
//! masks and a gradual sparsity schedule, knowledge distillation,
//! masked-language-model pretraining and task fine-tuning regimes, a
//! synthetic two-domain corpus generator, a CSR sparse inference path,
//! binary checkpoints, and the experiment harness behind the `magprune`
//! CLI.

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod pruning;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
