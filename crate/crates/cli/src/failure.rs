//! Failure classes and their process exit codes.

use std::fmt;

use nrreg_core::ErrorClass;

/// A CLI-level failure with an explicit class.
#[derive(Debug)]
pub struct Failure {
    pub class: ErrorClass,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        class: ErrorClass::Validation,
        message: message.into(),
    }
}

pub fn numerical(message: impl Into<String>) -> Failure {
    Failure {
        class: ErrorClass::Numerical,
        message: message.into(),
    }
}

pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Validation => 2,
        ErrorClass::Numerical => 3,
        ErrorClass::Io => 4,
    }
}

/// Class of the first recognizable error in the chain; unknown errors
/// count as validation failures.
pub fn classify(err: &anyhow::Error) -> ErrorClass {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.class;
        }
        if let Some(e) = cause.downcast_ref::<nrreg_core::Error>() {
            return e.class();
        }
        if cause.is::<std::io::Error>() {
            return ErrorClass::Io;
        }
    }
    ErrorClass::Validation
}
