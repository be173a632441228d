use thiserror::Error;

/// Library-wide error type.
///
/// Errors are grouped by how the pipeline should react to them:
/// `Validation` covers malformed or inconsistent inputs (bad shapes,
/// non-finite values, missing columns), `Numerical` covers failures of the
/// numerics themselves (non-convergence, rank deficiency, factorization
/// failure). The CLI maps these to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),

    #[error("numerical: {0}")]
    Numerical(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code for this error class: 2 for validation-type
    /// failures (including I/O and parsing), 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
