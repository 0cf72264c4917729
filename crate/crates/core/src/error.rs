use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Target values span a zero-width range (fewer than two distinct values).
    #[error("degenerate range: input has fewer than two distinct values")]
    DegenerateRange,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Cholesky factorization failed even after the jitter ladder was exhausted.
    #[error("ill-conditioned covariance: factorization failed at jitter {final_jitter:e}")]
    Conditioning { final_jitter: f64 },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("loss requires a fitted density model, but none was supplied")]
    MissingDensity,

    #[error("invalid loss spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A minibatch produced a non-finite gradient; training aborts.
    #[error("non-finite gradient in batch {batch_index}")]
    NonFiniteGradient { batch_index: usize },

    /// Training loss became non-finite; the per-epoch history up to that
    /// point is attached for post-mortem.
    #[error("training diverged at epoch {epoch}")]
    Divergence {
        epoch: usize,
        history: Vec<(f64, f64)>,
    },

    #[error("too few samples: {0}")]
    TooFewSamples(String),

    /// The observed supports of the two sample sets do not intersect.
    #[error("disjoint support: observed ranges do not overlap")]
    DisjointSupport,

    /// The requested event rate leaves no positive examples.
    #[error("degenerate event rate: no positive samples under the threshold")]
    DegenerateRate,

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-uniform time grid at row {row}: step {step} differs from {dt}")]
    NonUniformTimeGrid { row: usize, step: f64, dt: f64 },

    #[error("non-numeric cell at row {row}, column `{column}`: {value:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("degenerate channel `{0}`: zero variance")]
    DegenerateChannel(String),

    #[error("series too short: need at least {needed} rows, have {have}")]
    SeriesTooShort { needed: usize, have: usize },

    #[error("bad parameter: {0}")]
    BadParameter(String),

    #[error("run manifest does not match the on-disk manifest; refusing to resume")]
    ResumeMismatch,

    #[error("missing model files: {0:?}")]
    MissingModels(Vec<String>),

    #[error("parse error in {path}: {message}")]
    ParseFile { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
