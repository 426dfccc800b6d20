//! Data ingestion, persistence and the `slnet` command surface.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pointfile;
pub mod synth;

pub use error::{CliError, Result};
