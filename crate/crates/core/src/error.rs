use std::io;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("unknown symbol {symbol:?} at position {position}")]
    UnknownSymbol { symbol: char, position: usize },
    #[error("token id {0} is outside the vocabulary")]
    InvalidToken(u32),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("context overflow: sequence of length {len} exceeds limit {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("models do not share configuration and vocabulary")]
    ConfigMismatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("lot is empty")]
    EmptyLot,
    #[error("LoRA adapters are already attached")]
    LoraAlreadyAttached,
    #[error("LoRA adapters are not attached")]
    LoraNotAttached,
    #[error("LoRA target {0:?} does not exist")]
    LoraTarget(String),
    #[error("not a checkpoint")]
    NotACheckpoint,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("fractions sum to {sum}, expected 1")]
    FractionMismatch { sum: f64 },
    #[error("novel share {share} exceeds the rarity limit {limit}")]
    NoveltyTooLarge { share: f64, limit: f64 },
    #[error("unknown domain kind {0:?}")]
    UnknownKind(String),
    #[error("unknown scoring method {0:?}")]
    UnknownMethod(String),
    #[error("metric requires both novel and in-distribution examples")]
    SingleClass,
    #[error("labels and corpus are misaligned: {0}")]
    Misaligned(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
