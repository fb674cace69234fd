//! File formats, dataset IO, training, evaluation, texture shifts and the
//! CKA bias report on top of `monoformer-core`, plus the `monoformer` CLI.
//!
//! * [`dataset`] and [`io`]: sequence datasets on disk and their formats.
//! * [`trainer`] and [`checkpoint`]: the training loop and its checkpoints.
//! * [`evaluate`]: depth metrics over a dataset.
//! * [`shift`]: texture-shifted dataset copies with checksummed manifests.
//! * [`analysis`]: per-batch CKA reports, CSVs and figures.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod shift;
pub mod trainer;

pub use error::{AppError, Result};
