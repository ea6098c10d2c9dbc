use thiserror::Error;

/// Errors raised anywhere in the model, sampler, smoother and I/O layers.
#[derive(Debug, Error)]
pub enum DglmError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("data error at row {row}, column `{column}`: {message}")]
    DataRow {
        row: usize,
        column: String,
        message: String,
    },

    #[error("linear predictor diverged at t = {t} (eta = {eta})")]
    Divergence { t: usize, eta: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DglmError {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DglmError::Config(_) => 2,
            DglmError::Data(_) | DglmError::DataRow { .. } | DglmError::Io { .. } => 3,
            DglmError::Divergence { .. }
            | DglmError::NotPositiveDefinite(_)
            | DglmError::Numerical(_)
            | DglmError::Dimension(_) => 4,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DglmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DglmError>;
