//! Tabular (CSV + JSON schema) and grayscale image (IDX) datasets.

mod idx;
mod schema;
mod tabular;

use std::path::PathBuf;

use thiserror::Error;

pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, ImageDataset};
pub use schema::{round_discrete, validate_row, ColumnKind, ColumnSpec, Schema};
pub use tabular::{load_csv, parse_csv, NormStats, TabularCodec, TabularDataset};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("missing column {0:?} in header")]
    MissingColumn(String),
    #[error("row {row}, column {column:?}: cannot parse {value:?}")]
    Unparseable { row: usize, column: String, value: String },
    #[error("row {row}, column {column:?}: {detail}")]
    KindViolation { row: usize, column: String, detail: String },
    #[error("column {0:?} is constant")]
    ConstantColumn(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("{what}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { what: &'static str, expected: u32, found: u32 },
    #[error("{what}: header declares {declared} bytes of payload, file holds {actual}")]
    Truncated { what: &'static str, declared: usize, actual: usize },
    #[error("{0}")]
    Invalid(String),
}
