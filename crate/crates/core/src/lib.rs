pub mod cli;
pub mod corpus;
pub mod detectors;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod hypergraph;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
