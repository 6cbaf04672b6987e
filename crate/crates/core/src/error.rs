use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(&'static str),

    #[error("rank-deficient cloud: smallest/largest singular value ratio {ratio:e} is below {threshold:e}")]
    RankDeficient { ratio: f64, threshold: f64 },

    #[error("projective weight {weight:e} at point {index} is below the guard {guard:e}")]
    NearInfiniteProjection { index: usize, weight: f64, guard: f64 },

    #[error("point count {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate triple (vertex {a}, rays {b}, {c}): angle undefined")]
    DegenerateTriple { a: usize, b: usize, c: usize },

    #[error("gave up after {attempts} attempts to draw a non-degenerate triple")]
    TooManyDegenerateTriples { attempts: usize },

    #[error("sampler stuck: {what} rejected {attempts} times")]
    SamplerStuck { what: &'static str, attempts: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFiniteValue(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("split '{0}' would be empty")]
    EmptySplit(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(format: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            format,
            detail: detail.into(),
        }
    }
}
