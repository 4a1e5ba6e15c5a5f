use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate signal: node {row}{}", window.map(|w| format!(" in window {w}")).unwrap_or_default())]
    DegenerateSignal { row: usize, window: Option<usize> },

    #[error("insufficient frames: T={frames}, window size {window_size}, stride {stride} gives no complete window")]
    InsufficientFrames {
        frames: usize,
        window_size: usize,
        stride: usize,
    },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint incompatible with configuration; differing fields: {}", .0.join(", "))]
    Compatibility(Vec<String>),

    #[error("parse error in {}: line {line}, column {column} (byte offset {offset}): {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },

    #[error("data error in {}: {message}", path.display())]
    Data { path: PathBuf, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Configuration,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::InsufficientFrames { .. }
            | Error::Compatibility(_)
            | Error::Parse { .. }
            | Error::Contract(_)
            | Error::Shape { .. } => ErrorClass::Configuration,
            Error::DegenerateSignal { .. }
            | Error::Stratification(_)
            | Error::Data { .. }
            | Error::Io { .. } => ErrorClass::Data,
            Error::UndefinedMetric(_) | Error::DegenerateTest(_) | Error::NonFinite(_) => {
                ErrorClass::Numerical
            }
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Converts a serde_json error into a [`Error::Parse`] carrying a byte offset.
    pub(crate) fn json(path: impl Into<PathBuf>, text: &str, err: serde_json::Error) -> Self {
        let (line, column) = (err.line(), err.column());
        Error::Parse {
            path: path.into(),
            line,
            column,
            offset: byte_offset(text, line, column),
            message: err.to_string(),
        }
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub type Result<T> = std::result::Result<T, Error>;
