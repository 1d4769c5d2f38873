use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: missing required column(s): {}", path.display(), missing.join(", "))]
    Schema { path: PathBuf, missing: Vec<String> },

    #[error(
        "{}: {malformed} of {rows} rows malformed (limit 1%), lines: {}",
        path.display(),
        fmt_lines(lines)
    )]
    TooManyMalformed {
        path: PathBuf,
        malformed: usize,
        rows: usize,
        lines: Vec<u64>,
    },

    #[error("{}: dataset is empty", path.display())]
    EmptyDataset { path: PathBuf },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training set must contain both classes ({positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },

    #[error("unsupported model format version {found:?} (expected {expected:?})")]
    Version { found: String, expected: String },

    #[error("model checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("model not found: {}", .0.display())]
    ModelNotFound(PathBuf),

    #[error("no embedding table bound as {0:?}")]
    MissingTable(String),

    #[error("ensemble is missing a model for category {0}")]
    MissingCategory(&'static str),

    #[error("output directory is locked by another run: {}", .0.display())]
    Locked(PathBuf),

    #[error("{0}")]
    Pipeline(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn fmt_lines(lines: &[u64]) -> String {
    const SHOWN: usize = 20;
    let mut out = lines
        .iter()
        .take(SHOWN)
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    if lines.len() > SHOWN {
        out.push_str(&format!(" (+{} more)", lines.len() - SHOWN));
    }
    out
}
