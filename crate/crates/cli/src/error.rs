use std::fmt;

use mixinf::LmmError;

/// Failure classes, one per non-zero exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numeric(String),
    NothingToDo(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 2,
            Self::Numeric(_) => 3,
            Self::NothingToDo(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Validation(m) => write!(f, "invalid input: {m}"),
            Self::Numeric(m) => write!(f, "numeric failure: {m}"),
            Self::NothingToDo(m) => write!(f, "nothing to do: {m}"),
        }
    }
}

impl From<LmmError> for CliError {
    fn from(e: LmmError) -> Self {
        match e {
            LmmError::Structural(_) | LmmError::Argument(_) | LmmError::Dimension { .. } | LmmError::Rank(_) => {
                Self::Validation(e.to_string())
            }
            LmmError::Degenerate { .. } | LmmError::NotPsd { .. } | LmmError::Numeric(_) => {
                Self::Numeric(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Validation(e.to_string())
    }
}

pub fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

pub type CliResult<T> = Result<T, CliError>;
