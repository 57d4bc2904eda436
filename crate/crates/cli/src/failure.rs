use std::fmt;

use deskbc_core::error::{AnalysisError, DataError, EngineError, LoadError, ModelError};

/// Command failure, split by the exit-code contract: bad input or
/// configuration exits 1, anything failing while running exits 2.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) => write!(f, "invalid input: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

pub fn invalid(m: impl Into<String>) -> Failure {
    Failure::Invalid(m.into())
}

pub fn runtime(m: impl fmt::Display) -> Failure {
    Failure::Runtime(m.to_string())
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<LoadError> for Failure {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Invalid(d) => d.into(),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Shape(_) | ModelError::EmptyDataset | ModelError::Data(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Model(m) => m.into(),
            EngineError::FrameSize { .. } => Failure::Invalid(e.to_string()),
            EngineError::Uninitialized => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::InvalidInput(m) => Failure::Invalid(m),
            AnalysisError::Model(m) => m.into(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}
