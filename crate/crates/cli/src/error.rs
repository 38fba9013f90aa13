use serde::Serialize;
use thiserror::Error;

/// CLI failures, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid or inconsistent configuration (exit 2).
    #[error("{0}")]
    Config(String),
    /// Missing, unreadable or malformed files (exit 2).
    #[error("{0}")]
    Io(String),
    /// A numerical operation failed (exit 1). `context` is empty or ends in `": "`.
    #[error("{context}{source}")]
    Compute { context: String, source: nbafl_core::Error },
}

impl From<nbafl_core::Error> for CliError {
    fn from(e: nbafl_core::Error) -> Self {
        use nbafl_core::Error as E;
        match e {
            E::FingerprintMismatch { .. } => CliError::Config(e.to_string()),
            E::Format(_) | E::Io(_) => CliError::Io(e.to_string()),
            other => CliError::compute(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
    exit_code: i32,
}

#[derive(Serialize)]
struct ErrorObject<'a> {
    error: ErrorBody<'a>,
}

impl CliError {
    pub fn compute(source: nbafl_core::Error) -> Self {
        CliError::Compute { context: String::new(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Compute { .. } => 1,
            CliError::Config(_) | CliError::Io(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Compute { .. } => "computation",
        }
    }

    pub fn message(&self) -> String {
        self.to_string()
    }

    pub fn with_context(self, context: &str) -> CliError {
        match self {
            CliError::Config(m) => CliError::Config(format!("{context}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{context}: {m}")),
            CliError::Compute { context: inner, source } => {
                CliError::Compute { context: format!("{context}: {inner}"), source }
            }
        }
    }

    pub fn to_json(&self) -> String {
        let obj = ErrorObject { error: ErrorBody { kind: self.kind(), message: self.message(), exit_code: self.exit_code() } };
        serde_json::to_string(&obj).expect("error object serializes")
    }
}
