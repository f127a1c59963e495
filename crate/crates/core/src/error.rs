use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {message} (rows: {rows:?})")]
    Validation { message: String, rows: Vec<usize> },

    #[error("singular weighted design: pivot column {column} ({name}) is linearly dependent")]
    SingularDesign { column: usize, name: String },

    #[error("smoother specification error: {0}")]
    Smoother(String),

    #[error("design error: {0}")]
    Design(String),

    #[error("selection probability error: {0}")]
    Probability(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("inference error: {failed} of {total} replicate fits failed")]
    ReplicateFailures { failed: usize, total: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

impl Error {
    pub(crate) fn validation(message: impl Into<String>, rows: Vec<usize>) -> Self {
        Error::Validation {
            message: message.into(),
            rows,
        }
    }

    /// True for failures caused by bad input rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Csv(_)
                | Error::Schema(_)
                | Error::Validation { .. }
                | Error::Smoother(_)
                | Error::Design(_)
                | Error::Probability(_)
                | Error::Parameter(_)
                | Error::Capacity(_)
                | Error::GridMismatch(_)
        )
    }
}
