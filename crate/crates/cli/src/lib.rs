//! Pipeline orchestration for the retrieval-head workbench: a versioned
//! run configuration, one function per stage, and run comparison.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use config::{Objective, RunConfig, Sampler, CONFIG_VERSION};
pub use error::{CliError, CliResult};
pub use stages::{compare, resolve_run_dir, Options, Pipeline, OUTPUT_ROOT_ENV};
