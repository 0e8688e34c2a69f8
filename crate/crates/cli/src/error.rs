use std::fmt;

use thiserror::Error;

/// A configuration problem, with the 1-based line it refers to when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n{}", render(.0))]
    Config(Vec<Diagnostic>),

    #[error(transparent)]
    Core(#[from] sdreplica::Error),

    #[error("i/o: {0}")]
    Io(String),

    #[error("{failed} of {total} grid points failed, above the {threshold} threshold")]
    TooManyFailures { failed: usize, total: usize, threshold: f64 },
}

fn render(d: &[Diagnostic]) -> String {
    d.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    pub fn diagnostics(&self) -> &[Diagnostic] {
        match self {
            CliError::Config(d) => d,
            _ => &[],
        }
    }
}
