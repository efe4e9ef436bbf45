//! File formats, run bookkeeping and the command-line front end for
//! [`transmamba_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;

pub use checkpoint::Checkpoint;
pub use config::{RunConfig, TaskSettings};
pub use error::CliError;
