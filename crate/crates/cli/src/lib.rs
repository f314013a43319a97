//! Library side of the `rana` command: tensor files, bundles and the
//! subcommand implementations.

pub mod bundle;
pub mod commands;
pub mod error;
pub mod tensor_file;

pub use error::{exit, CliError, CliResult};
