use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("corrupt NIfTI header: {0}")]
    CorruptHeader(String),

    #[error("NIfTI file declares {0} dimensions, at most 4 are supported")]
    DimensionOverflow(usize),

    #[error("volume contains non-finite samples")]
    RejectNonFinite,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("displacement field is not diffeomorphic: |db/dy| = {max_derivative:.4} at voxel {voxel:?}")]
    NonDiffeomorphicField {
        max_derivative: f64,
        voxel: [usize; 3],
    },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("acquisition scheme has only {found} non-collinear diffusion directions, need 6")]
    InsufficientDirections { found: usize },

    #[error("tensor design matrix is singular")]
    SingularDesign,

    #[error("centerline fit needs at least 4 slices, got {0}")]
    TooFewSlices(usize),

    #[error("duplicate spline parameter t = {0}")]
    DuplicateParameter(f64),

    #[error("parameter {t} outside the centerline domain [{min}, {max}]")]
    OutOfDomain { t: f64, min: f64, max: f64 },

    #[error("mask is empty")]
    EmptyMask,

    #[error("region has no usable voxels")]
    EmptyRegion,

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("no ranking records")]
    NoRecords,

    #[error("missing output for method {0}")]
    MissingMethodOutput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("port {0} is already in use")]
    PortInUse(u16),

    #[error("malformed input: {0}")]
    Malformed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
