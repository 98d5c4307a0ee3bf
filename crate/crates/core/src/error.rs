use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the pipeline.
///
/// Variants split into two families that the command-line driver maps to
/// different exit codes: input/validation problems (bad files, bad config,
/// violated invariants) and runtime problems (transport, budget).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("template error: unbound placeholder `{0}`")]
    Template(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no \\boxed{{...}} span in text")]
    Extraction,

    #[error("unsupported capability `{capability}` on {role} endpoint")]
    Unsupported { role: String, capability: String },

    #[error("budget exceeded for {role}: {detail}")]
    Budget { role: String, detail: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("remote error: {0}")]
    Remote(String),

    #[error("judge output could not be parsed: {raw:?}")]
    JudgeParse { raw: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for failures caused by the outside world at run time (network,
    /// remote services, exhausted budgets) rather than by bad inputs.
    pub fn is_runtime(&self) -> bool {
        matches!(
            self,
            Error::Budget { .. } | Error::Transport(_) | Error::Protocol(_) | Error::Remote(_)
        )
    }

    /// Short machine-readable kind, used in error lines on stderr.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
            Error::Template(_) => "template",
            Error::Degenerate(_) => "degenerate",
            Error::Extraction => "extraction",
            Error::Unsupported { .. } => "unsupported",
            Error::Budget { .. } => "budget",
            Error::Transport(_) => "transport",
            Error::Protocol(_) => "protocol",
            Error::Remote(_) => "remote",
            Error::JudgeParse { .. } => "judge_parse",
            Error::Integrity(_) => "integrity",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
        }
    }
}
