//! File formats, reports and subcommands behind the `harmonia` binary.

pub mod bfp_file;
pub mod commands;
pub mod error;
pub mod report;
pub mod tensor_file;

pub use commands::{run_cli, Cli};
pub use error::{CliError, Result};
