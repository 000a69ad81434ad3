//! Compositional temporal grounding with hierarchical semantic graphs.
//!
//! The crate covers the graph data model and encoders, cross-graph
//! correspondence with an interval head, the training objectives and
//! trainer, a synthetic world generator, the compositional splitter, and
//! evaluation metrics. [`pipeline`] wires them into runnable commands.

pub mod annotation;
pub mod config;
pub mod crossgraph;
pub mod diagnostics;
pub mod datagen;
pub mod embedding;
pub mod encoder;
mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod splitter;
pub mod train;

pub use compground_tensor as tensor;
pub use error::{Error, Result};
