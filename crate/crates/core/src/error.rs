use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum HybridError {
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("quantile level {0} outside (0, 1)")]
    InvalidLevel(f64),

    #[error("invalid cells: {0}")]
    InvalidCells(String),

    #[error("numerical failure{}: {message}", index.map(|i| format!(" at index {i}")).unwrap_or_default())]
    NumericalFailure {
        message: String,
        index: Option<usize>,
    },

    #[error("optimization failed: {0}")]
    OptimizationFailure(String),

    /// The joint score/control covariance is rank deficient: the controls
    /// lie in the span of the model scores (or vice versa).
    #[error("degenerate controls: {0}")]
    DegenerateControls(String),

    #[error("profile constraint psi = {target} unreachable (closest {reached})")]
    ProfileInfeasible { target: f64, reached: f64 },

    #[error("degenerate focus: {0}")]
    DegenerateFocus(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("wide model fit failed: {0}")]
    WideFitFailure(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported controls: {0}")]
    UnsupportedControls(String),
}

impl HybridError {
    pub fn numerical(message: impl Into<String>) -> Self {
        HybridError::NumericalFailure {
            message: message.into(),
            index: None,
        }
    }

    pub fn numerical_at(message: impl Into<String>, index: usize) -> Self {
        HybridError::NumericalFailure {
            message: message.into(),
            index: Some(index),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            HybridError::NumericalFailure { .. }
                | HybridError::OptimizationFailure(_)
                | HybridError::DegenerateControls(_)
                | HybridError::ProfileInfeasible { .. }
                | HybridError::DegenerateFocus(_)
                | HybridError::WideFitFailure(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, HybridError>;
