//! The `trinity` command-line client.

pub mod client;
pub mod commands;
pub mod config;
pub mod error;
pub mod inspect;
pub mod output;

pub use error::{CliError, ExitKind};
