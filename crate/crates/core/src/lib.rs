//! Knowledge-graph guided radiology report generation.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod error;
pub mod graph;
pub mod image;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod queue;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod triplets;
pub mod vocab;

pub use error::{Error, Result};
