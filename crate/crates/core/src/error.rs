use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u32 },
    #[error("truncated {0} payload")]
    Truncated(&'static str),
    #[error("variant {variant} geometry differs from variant 0 at feature {feature}")]
    GeometryMismatch { variant: usize, feature: usize },
    #[error("point ({lat}, {lon}) lies outside the DEM grid")]
    OutOfBounds { lat: f64, lon: f64 },
    #[error("DEM sample missing near ({lat}, {lon})")]
    MissingData { lat: f64, lon: f64 },
    #[error("record {id:?}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },
    #[error("descriptor is all zeros")]
    DegenerateDescriptor,
    #[error("image has no local features")]
    EmptyImage,
    #[error("embedding projects to the zero vector")]
    DegenerateEmbedding,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no estimate available: {0}")]
    NoEstimate(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn for_record(id: &str, err: Error) -> Self {
        Error::Record {
            id: id.to_string(),
            source: Box::new(err),
        }
    }
}
