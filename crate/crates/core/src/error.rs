use thiserror::Error;

/// Errors produced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a precondition (range, positivity, emptiness).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two tensors that must agree in shape do not.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// A time index outside the schedule's `0..=T` range.
    #[error("time step {t} out of range 0..={max}")]
    TimeOutOfRange { t: i64, max: usize },

    /// Wrapper for I/O failures with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// IDX stream does not start with a known magic number.
    #[error("bad idx magic 0x{0:08x}")]
    BadMagic(u32),

    /// IDX payload shorter or longer than the header promises.
    #[error("truncated idx payload: expected {expected} bytes, got {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    /// IDX dimension product overflows or a dimension is zero.
    #[error("idx dimension overflow or zero dimension: {0:?}")]
    DimOverflow(Vec<usize>),

    /// PNG with a bit depth other than 8.
    #[error("unsupported bit depth in {0}")]
    UnsupportedBitDepth(String),

    /// Image decode failure.
    #[error("malformed image file {path}: {detail}")]
    MalformedImage { path: String, detail: String },

    /// Checkpoint file version not understood by this build.
    #[error("checkpoint version mismatch: file has {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    /// Checkpoint section failed its checksum.
    #[error("checkpoint checksum failure in section {0}")]
    ChecksumFailure(String),

    /// Checkpoint file ends before a section completes.
    #[error("truncated checkpoint: {0}")]
    TruncatedCheckpoint(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    /// A training gate (accuracy floor, step budget) was not met.
    #[error("training gate not met: {0}")]
    TrainingGate(String),

    /// Failure attributed to one cascade stage.
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attribute an error to a named cascade stage.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
