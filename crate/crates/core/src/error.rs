use thiserror::Error;

/// Errors raised by the laboratory.
///
/// Validation problems (`Domain`, `Parameter`, `Data`) map to CLI exit code 1,
/// everything else to exit code 2.
#[derive(Debug, Error)]
pub enum LabError {
    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A control parameter (cap, grid size, ladder length) is unusable.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data violates a structural requirement (degenerate profile, too few snapshots).
    #[error("data error: {0}")]
    Data(String),

    /// A least-squares fit could not be formed.
    #[error("fit error: {0}")]
    Fit(String),

    /// A numerical run failed.
    #[error("runtime failure: {0}")]
    Runtime(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    /// `true` for input-validation failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            LabError::Domain(_) | LabError::Parameter(_) | LabError::Data(_) | LabError::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

macro_rules! domain_err {
    ($($arg:tt)*) => { $crate::error::LabError::Domain(format!($($arg)*)) };
}
pub(crate) use domain_err;
