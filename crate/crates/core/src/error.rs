use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// A report references an iterate that is no longer (or never was) stored.
    #[error("history underflow: agent {agent} at iteration {iteration} needs iterate {computed_at}")]
    HistoryUnderflow {
        agent: usize,
        iteration: usize,
        computed_at: usize,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("numeric failure in {what}: residual {residual:e} after {iterations} iterations")]
    Numeric {
        what: &'static str,
        residual: f64,
        iterations: usize,
    },

    #[error("problem construction failed: {0}")]
    ProblemConstruction(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Process exit status for configuration problems.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit status for violated runtime invariants.
pub const EXIT_INVARIANT: i32 = 3;

impl Error {
    /// `EXIT_CONFIG` for anything wrong with the inputs, `EXIT_INVARIANT`
    /// for failures detected while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::DimensionMismatch { .. }
            | Error::Parse { .. }
            | Error::Config { .. }
            | Error::Io { .. } => EXIT_CONFIG,
            Error::HistoryUnderflow { .. }
            | Error::Numeric { .. }
            | Error::ProblemConstruction(_)
            | Error::InvariantViolation(_) => EXIT_INVARIANT,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
