//! Mapping of failures onto process exit codes.

use std::fmt;

pub const OK: i32 = 0;
pub const VALIDATION: i32 = 1;
pub const NUMERICAL: i32 = 2;
pub const IO_FORMAT: i32 = 3;

/// A configuration or argument problem detected by the driver itself.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// Exit code for an error chain: the first classifiable cause wins.
pub fn code(err: &anyhow::Error) -> i32 {
    use cones_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Validation(_) | E::UnknownCategory(_) | E::OutOfVocabulary(_) | E::FingerprintMismatch => VALIDATION,
                E::Numerical { .. } => NUMERICAL,
                E::Format { .. } | E::Io(_) | E::Json(_) => IO_FORMAT,
            };
        }
        if cause.is::<Invalid>() {
            return VALIDATION;
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return IO_FORMAT;
        }
    }
    VALIDATION
}
