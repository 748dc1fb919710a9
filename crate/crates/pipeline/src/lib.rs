//! The `metadt` command-line pipeline as a library, so tests can drive the
//! same code paths in-process.

pub mod config;
mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use config::{resolve_seed, Axis, PipelineConfig};
pub use error::{CliError, Result};
pub use pipeline::{EvalOutcome, EvalSummary, Pipeline};
