use thiserror::Error;

/// Errors produced by the core library.
///
/// The variants map onto the CLI exit-code classes: validation problems,
/// numerical failures (NaN, divergence) and I/O or file-format problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Validation(String),

    #[error("unknown category \"{0}\"")]
    UnknownCategory(String),

    #[error("out-of-vocabulary word \"{0}\"")]
    OutOfVocabulary(String),

    #[error("model fingerprint mismatch")]
    FingerprintMismatch,

    #[error("numerical failure at step {step}: {what}")]
    Numerical { step: usize, what: String },

    #[error("format error in {field}: {reason}")]
    Format { field: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn numerical(step: usize, what: impl Into<String>) -> Self {
        Error::Numerical {
            step,
            what: what.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
