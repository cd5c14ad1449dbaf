use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// A single broken invariant found by [`crate::seq::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub segment: Option<usize>,
    pub message: String,
}

impl Violation {
    pub fn new(segment: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            segment,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.segment {
            Some(i) => write!(f, "segment {i}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("format error in segment {index}: {message}")]
    SegmentFormat { index: usize, message: String },

    #[error("sequence failed validation: {}", join(.0))]
    Validation(Vec<Violation>),

    #[error("infeasible budget: {shortfall} token(s) short ({detail})")]
    Infeasible { shortfall: usize, detail: String },

    #[error("oracle refused: ground set of {size} exceeds the enumeration limit of {limit}")]
    GuardExceeded { size: usize, limit: usize },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

fn join(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
