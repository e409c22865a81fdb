use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    DimensionMismatch {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("invalid run-length mask: {0}")]
    InvalidRuns(String),

    #[error("invalid bounding box {0:?}")]
    InvalidBox([usize; 4]),

    #[error("invalid scene `{scene_id}`: {reason}")]
    InvalidScene { scene_id: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("inconsistent item `{qa_id}`: {reason}")]
    InconsistentItem { qa_id: String, reason: String },

    #[error("malformed record at line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("missing prediction for `{0}`")]
    MissingPrediction(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown word `{0}` (closed vocabulary)")]
    UnknownWord(String),

    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("model output is not grounded: no <SEG> within {0} tokens")]
    Ungrounded(usize),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
