//! File formats, dataset synthesis, analytics reports, training orchestration
//! and the `opchain` command line.

pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod stats;

pub use error::{Error, Result};
