//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// I/O failure while reading or writing cohort files.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A CSV row that could not be parsed.
    #[error("{file}:{line}: malformed row: {message}")]
    MalformedRow {
        file: String,
        line: usize,
        message: String,
    },

    /// A cohort file whose header or dates violate the expected schema.
    #[error("{file}: schema error: {message}")]
    Schema { file: String, message: String },

    /// An invalid generator or run configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller broke an API contract (shape mismatch, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Imputation could not complete.
    #[error("imputation failed for feature {feature}: {message}")]
    Imputation { feature: String, message: String },

    /// Scaler fitting failed.
    #[error("scaler error for feature {feature}: {message}")]
    Scaler { feature: String, message: String },

    /// Feature selection failed.
    #[error("feature selection error: {0}")]
    Selection(String),

    /// A cross-validation fold could not be built or trained.
    #[error("fold {fold}: {message}")]
    Fold { fold: usize, message: String },

    /// Training diverged or was handed an unusable dataset.
    #[error("training error: {0}")]
    Training(String),

    /// The adaptation decision procedure failed (e.g. the probe errored).
    #[error("adaptation decision error: {0}")]
    TtaDecision(String),

    /// The Shapley solver hit a singular system.
    #[error("attribution solver error: {0}")]
    ShapSolver(String),

    /// Checkpoint serialization problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable label for the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedRow { .. } => "malformed_row",
            Error::Schema { .. } => "schema",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Imputation { .. } => "imputation",
            Error::Scaler { .. } => "scaler",
            Error::Selection(_) => "selection",
            Error::Fold { .. } => "fold",
            Error::Training(_) => "training",
            Error::TtaDecision(_) => "tta_decision",
            Error::ShapSolver(_) => "shap_solver",
            Error::Checkpoint(_) => "checkpoint",
        }
    }
}
