//! Experiment harness: configuration, the end-to-end pipeline over a grid of
//! target values and seeds, figure emission and validation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod figures;
pub mod manifest;
pub mod pipeline;
pub mod stages;
pub mod svg;
pub mod validate;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use manifest::RunManifest;
pub use pipeline::{cmd_pipeline, PipelineOptions, PipelineOutcome};
