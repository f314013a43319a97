use std::path::{Path, PathBuf};

use rana_core::RanaError;

/// Process exit codes. Stable across releases.
pub mod exit {
    pub const OK: i32 = 0;
    /// Runtime failure or a failed self-check.
    pub const FAILURE: i32 = 1;
    /// Malformed file, JSON or argument.
    pub const PARSE: i32 = 2;
    pub const SHAPE: i32 = 3;
    pub const INFEASIBLE: i32 = 4;
    /// A required file or bundle does not exist.
    pub const MISSING: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: parse error at byte {offset}: {message}", path.display())]
    Parse { path: PathBuf, offset: u64, message: String },
    #[error("{}: invalid JSON: {message}", path.display())]
    Json { path: PathBuf, message: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("infeasible budget: {}", format_minimums(.0))]
    Infeasible(Vec<(String, f64)>),
    #[error("missing {what}: {}", path.display())]
    Missing { what: &'static str, path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] RanaError),
}

fn format_minimums(layers: &[(String, f64)]) -> String {
    layers
        .iter()
        .map(|(name, min)| format!("layer {name} needs at least {min:.4} of dense FLOPs"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Json { .. } | CliError::Argument(_) => exit::PARSE,
            CliError::Shape(_) => exit::SHAPE,
            CliError::Infeasible(_) => exit::INFEASIBLE,
            CliError::Missing { .. } => exit::MISSING,
            CliError::Io { .. } | CliError::CheckFailed(_) => exit::FAILURE,
            CliError::Core(e) => match e {
                RanaError::ShapeMismatch { .. } | RanaError::InvalidShape { .. } => exit::SHAPE,
                RanaError::InfeasibleBudget { .. } => exit::INFEASIBLE,
                RanaError::InvalidArgument(_) | RanaError::TargetOutOfRange { .. } => exit::PARSE,
                _ => exit::FAILURE,
            },
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return CliError::Missing { what: "file", path: path.to_path_buf() };
        }
        CliError::Io { path: path.to_path_buf(), source }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
