use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which rule a config failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax,
    UnknownBlock,
    DanglingReference,
    DuplicateDetect,
    MissingDetect,
    BadArguments,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParseErrorKind::Syntax => "syntax",
            ParseErrorKind::UnknownBlock => "unknown-block",
            ParseErrorKind::DanglingReference => "dangling-reference",
            ParseErrorKind::DuplicateDetect => "duplicate-detect",
            ParseErrorKind::MissingDetect => "missing-detect",
            ParseErrorKind::BadArguments => "bad-arguments",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// API misuse, such as calling backward on a non-scalar.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{kind} error at line {line}, column {column}: {message}")]
    Parse { kind: ParseErrorKind, line: usize, column: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("unknown parameter path `{0}`")]
    UnknownPath(String),

    #[error("missing parameter path `{0}`")]
    MissingPath(String),

    #[error("line {line}: {message}")]
    Label { line: usize, message: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Wraps an I/O error so the message names the file.
    pub(crate) fn at_path(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Short stable tag for machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Truncated(_) => "truncated",
            Error::UnknownPath(_) => "unknown-path",
            Error::MissingPath(_) => "missing-path",
            Error::Label { .. } => "label",
            Error::EmptyDataset => "empty-dataset",
            Error::Io(_) => "io",
        }
    }
}
