//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },

    #[error("grad check: loss function is not deterministic ({first} vs {second})")]
    NonDeterministicLoss { first: f64, second: f64 },

    #[error("grad check: epsilon must be in (0, 1e-2], got {0}")]
    BadEpsilon(f64),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("vocab max size must exceed the {reserved} reserved entries, got {got}")]
    VocabTooSmall { reserved: usize, got: usize },

    #[error("corpus line {line}: expected 2 or 3 tab-separated fields, found {found}")]
    MalformedCorpusLine { line: usize, found: usize },

    #[error("corpus line {line}: {details}")]
    BadCorpusLine { line: usize, details: String },

    #[error("vocab file: {0}")]
    BadVocabFile(String),

    #[error("embedding file line {line}: {details}")]
    BadEmbeddingLine { line: usize, details: String },

    #[error("synthetic corpus supports at most {max} modes, requested {requested}")]
    TooManyModes { requested: usize, max: usize },

    #[error("cannot encode an empty sequence")]
    EmptySequence,

    #[error("selector: need at least one mapping module")]
    NoMappingModules,

    #[error("gumbel softmax: temperature must be positive, got {0}")]
    BadTemperature(f64),

    #[error("attention: every position is masked")]
    AllPositionsMasked,

    #[error("generation loss: {rows} logit rows vs {targets} targets")]
    TargetLengthMismatch { rows: usize, targets: usize },

    #[error("negative sampling requires batch size >= 2, got {0}")]
    BatchTooSmall(usize),

    #[error("adam: no gradient recorded for parameter `{0}`")]
    MissingGradient(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    TrainDiverged { epoch: usize, batch: usize },

    #[error("training requires non-empty train and validation splits")]
    EmptySplit,

    #[error("checkpoint: bad magic bytes")]
    CheckpointBadMagic,

    #[error("checkpoint: unsupported format version {0}")]
    CheckpointBadVersion(u32),

    #[error("checkpoint: file truncated")]
    CheckpointTruncated,

    #[error("checkpoint: parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    CheckpointDimensionMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint stores {stored:?} values but {requested:?} was requested")]
    FloatWidthMismatch {
        stored: crate::scalar::FloatWidth,
        requested: crate::scalar::FloatWidth,
    },

    #[error("selection stats: pair {0} has no mode label")]
    MissingModeLabel(usize),

    #[error("invalid config: {0}")]
    BadConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
