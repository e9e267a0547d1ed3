use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid generation spec: {0}")]
    InvalidSpec(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("length pair (m={m}, l={l}) has zero probability under the length model")]
    UnseenLength { m: usize, l: usize },

    #[error("keep fraction {0} is outside (0, 1]")]
    InvalidKeepFraction(f64),

    #[error("target of length {length} exceeds l_max={l_max}")]
    TargetTooLong { length: usize, l_max: usize },

    #[error("token id {id} is out of range for a vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("sequence of length {length} exceeds max_len={max_len}")]
    SequenceTooLong { length: usize, max_len: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("label smoothing {0} is outside [0, 1)")]
    InvalidSmoothing(f64),

    #[error("batch has no unmasked loss positions")]
    EmptyLossMask,

    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("search space of {count} sequences exceeds the enumeration limit {limit}")]
    SearchSpaceTooLarge { count: u128, limit: u128 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
