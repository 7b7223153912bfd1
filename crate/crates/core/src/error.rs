use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("non-mono audio: {0} channels")]
    NonMono(u16),

    #[error("unsupported wav encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("wav decode error: {0}")]
    Wav(String),

    #[error("signal of {len} samples is shorter than window {window}")]
    TooShort { len: usize, window: usize },

    #[error("empty segment")]
    EmptySegment,

    #[error("k-means needs at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },

    #[error("degenerate features: only {distinct} distinct points for {clusters} clusters")]
    DegenerateFeatures { distinct: usize, clusters: usize },

    #[error("batch of {batch} utterances is smaller than K={k}")]
    BatchTooSmall { batch: usize, k: usize },

    #[error("chunk energy stayed below threshold after {0} attempts")]
    SilentChunk(usize),

    #[error("every pairing is infeasible")]
    AllInfeasible,

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
