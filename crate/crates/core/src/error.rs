use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A single config violation, addressed by its dotted key path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("setup error: {0}")]
    Setup(String),

    #[error("config error: {}", join_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error("format error: {0}")]
    Format(String),

    #[error("file error: {}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn join_issues(issues: &[ConfigIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl Error {
    /// Short machine-readable class name, used by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Numeric(_) => "numeric",
            Error::Setup(_) => "setup",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::File { .. } => "file",
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config(vec![ConfigIssue {
            key: key.into(),
            message: message.into(),
        }])
    }
}
