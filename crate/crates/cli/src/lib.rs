//! Batch front end for hybrid likelihood estimation: configuration, data
//! ingestion, commands and their output files.

pub mod commands;
pub mod config;
pub mod data;
pub mod output;
pub mod simulate;

use hybridlik::HybridError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] HybridError),
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError::Config(message.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => EXIT_CONFIG,
            CliError::Core(e) => match e {
                HybridError::UnsupportedModel(_)
                | HybridError::InvalidLevel(_)
                | HybridError::InvalidCells(_)
                | HybridError::InvalidGrid(_)
                | HybridError::InvalidInput(_)
                | HybridError::UnsupportedControls(_) => EXIT_CONFIG,
                _ => EXIT_NUMERICAL,
            },
        }
    }

    /// Short machine-readable kind for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Core(e) => match e {
                HybridError::UnsupportedModel(_) => "unsupported_model",
                HybridError::InvalidLevel(_) => "invalid_level",
                HybridError::InvalidCells(_) => "invalid_cells",
                HybridError::NumericalFailure { .. } => "numerical_failure",
                HybridError::OptimizationFailure(_) => "optimization_failure",
                HybridError::DegenerateControls(_) => "degenerate_controls",
                HybridError::ProfileInfeasible { .. } => "profile_infeasible",
                HybridError::DegenerateFocus(_) => "degenerate_focus",
                HybridError::InvalidGrid(_) => "invalid_grid",
                HybridError::WideFitFailure(_) => "wide_fit_failure",
                HybridError::InvalidInput(_) => "invalid_input",
                HybridError::UnsupportedControls(_) => "unsupported_controls",
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
