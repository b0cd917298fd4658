//! Command-line laboratory around `solfgr-core`: run configuration, artifact formats
//! and the pipelines behind each subcommand.

pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{LabError, LabResult};
