//! Pipeline driver for simile property probing: stage functions, run
//! configuration, content-hash caching and the released-data import shim.

pub mod config;
pub mod error;
pub mod import;
pub mod models;
pub mod pipeline;
pub mod stages;
pub mod store;

pub use config::{ExperimentConfig, Objective, Stage};
pub use error::{exit_code, Precondition, EXIT_OK, EXIT_PRECONDITION, EXIT_STAGE};
pub use pipeline::{run_pipeline, RunSummary};
