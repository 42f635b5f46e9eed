use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report. The variant name doubles as the
/// stable error class printed by the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),
    #[error("missing class {class}: no pixel carries this label")]
    MissingClass { class: usize },
    #[error("optimizer error: parameter `{name}` has no gradient")]
    MissingGradient { name: String },
    #[error("pairing error: unmatched files {orphans:?}")]
    Pairing { orphans: Vec<String> },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("labeling error: {0}")]
    Labeling(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    /// Short class tag, e.g. `dimension` or `io`.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Usage(_) => "usage",
            Error::Domain(_) => "domain",
            Error::DegenerateStatistics(_) => "statistics",
            Error::MissingClass { .. } => "missing-class",
            Error::MissingGradient { .. } => "optimizer",
            Error::Pairing { .. } => "pairing",
            Error::Shape(_) => "shape",
            Error::Labeling(_) => "labeling",
            Error::Split(_) => "split",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::NonFiniteLoss { .. } => "non-finite",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
