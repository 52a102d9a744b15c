use std::path::PathBuf;

use crate::model::{HeadId, ModelParams};

/// Parameters from before the update that diverged.
pub struct LastGood(pub ModelParams<f32>);

impl std::fmt::Debug for LastGood {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LastGood({} parameters)", self.0.len())
    }
}

/// Errors raised by the workbench library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {token} is outside the vocabulary (size {vocab_size})")]
    InvalidToken { token: u32, vocab_size: usize },

    #[error("head {0} is not valid for this model")]
    InvalidHead(HeadId),

    #[error("context overflow: prompt {prompt} + max_new_tokens {new} > max_seq_len {max}")]
    ContextOverflow {
        prompt: usize,
        new: usize,
        max: usize,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),

    #[error("training diverged at step {step}: {detail}")]
    Diverged {
        step: usize,
        detail: String,
        last_good: Box<LastGood>,
    },

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("shape mismatch for tensor `{tensor}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("task geometry: {0}")]
    Geometry(String),

    #[error("trace has {trace} steps but {tokens} tokens were generated")]
    TraceMismatch { trace: usize, tokens: usize },

    #[error("decode failed on instance {instance}: {source}")]
    InstanceFailed {
        instance: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("threshold {0} outside (0, 1]")]
    ThresholdOutOfRange(f64),

    #[error("mask size {size} exceeds eligible pool of {pool} heads")]
    MaskTooLarge { size: usize, pool: usize },

    #[error("empty test set")]
    EmptyTestSet,

    #[error("all {0} generations failed")]
    AllGenerationsFailed(usize),

    #[error("sampler incompatible with target: {0}")]
    IncompatibleSampler(String),

    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: u32, found: u32 },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
