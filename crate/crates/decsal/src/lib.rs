//! Harness around `decsal-core`: file formats, checkpoints, experiment
//! configuration, the staged pipeline, and report emitters.

#![forbid(unsafe_code)]

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod ingest;
pub mod pipeline;
pub mod report;
pub mod vocab_io;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use pipeline::{Layout, Manifest, Pipeline, RunOptions};
