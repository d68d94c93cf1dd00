use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {what}: {left:?} vs {right:?}")]
    Shape {
        what: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("map of {h}x{w} is not divisible by the {rows}x{cols} patch grid; pad it with pad_to_multiple first")]
    NotDivisible {
        h: usize,
        w: usize,
        rows: usize,
        cols: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0} in record {1}")]
    UnsupportedDtype(u8, String),
    #[error("checkpoint record {name} has shape {found:?}, model expects {expected:?}")]
    RecordShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing record {0}")]
    MissingRecord(String),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("data directory {0} does not exist")]
    MissingDir(PathBuf),
    #[error("no usable images in {0}")]
    NoImages(PathBuf),
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        what,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
