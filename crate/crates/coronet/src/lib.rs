//! File formats, configuration and pipeline orchestration around
//! `coronet-core`, plus the `coronet` command-line tool.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod import;
pub mod pipeline;
pub mod projection_io;
pub mod volume_io;

pub use config::{parse_config, RunConfig};
pub use error::{CliError, Result};
