use thiserror::Error;

/// Errors produced by the volumetric kernels.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape([usize; 3]),
    #[error("invalid spacing {0:?}: every component must be strictly positive")]
    InvalidSpacing([f64; 3]),
    #[error("data length {got} does not match shape product {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at voxel {0}")]
    NonFinite(usize),
    #[error("label {label} at voxel {index} is outside [0, {num_classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("invalid class count {0}: need at least 2 and at most 255")]
    InvalidClassCount(usize),
    #[error("probabilities at voxel {index} are invalid (sum {sum})")]
    InvalidProbabilities { index: usize, sum: f64 },
    #[error("degenerate intensity range")]
    DegenerateRange,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("class count mismatch: {0} vs {1}")]
    ClassMismatch(usize, usize),
    #[error("length mismatch: {0} vs {1}")]
    VectorLengthMismatch(usize, usize),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("timestep {t} outside [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("undefined surface metric: class {0} has an empty surface")]
    UndefinedSurface(usize),
    #[error("infeasible box fraction range [{lo}, {hi}] for shape {shape:?}")]
    InfeasibleBox { lo: f64, hi: f64, shape: [usize; 3] },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("bad magic: not a UVF volume file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionMismatch(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLengthMismatch { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
