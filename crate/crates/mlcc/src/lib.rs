//! File formats, experiment configuration, benchmark runner and command-line
//! interface around `mlcc-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod svg;
pub mod table;

pub use config::HarnessConfig;
pub use error::{HarnessError, Result};
