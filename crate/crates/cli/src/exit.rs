//! Failures carrying their process exit code.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | verification failure, or a run that failed numerically |
//! | 2 | I/O error, malformed input file, or invalid configuration |
//! | 3 | a required artifact (dataset, teacher, checkpoint) is missing |

use std::fmt;

use lix_core::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Code {
    Failed = 1,
    Io = 2,
    Missing = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub code: Code,
    pub message: String,
}

impl Failure {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Code::Io, message)
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self::new(Code::Missing, message)
    }

    pub fn failed(message: impl Into<String>) -> Self {
        Self::new(Code::Failed, message)
    }

    pub fn from_core(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Format(_) | Error::InvalidArgument(_) => Code::Io,
            _ => Code::Failed,
        };
        Self::new(code, e.to_string())
    }

    pub fn context(self, what: impl fmt::Display) -> Self {
        Self {
            code: self.code,
            message: format!("{what}: {}", self.message),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.code as i32
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::from_core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(Code::Io, e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Self::new(Code::Io, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::new(Code::Io, e.to_string())
    }
}
