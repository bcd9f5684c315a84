use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty distribution")]
    EmptyDistribution,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("candidate outside draft support")]
    OutsideDraftSupport,
    #[error("improper branch probability {0}")]
    ImproperProbability(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("n-alpha defined for chain drafts")]
    NotChainTraces,
    #[error("no cycles recorded")]
    EmptyTraces,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("target accuracy threshold not reached: {0}")]
    AccuracyNotReached(String),
    #[error("speculative output differs from target decoding on example {example}")]
    GreedyMismatch { example: usize },
    #[error("weight file: {0}")]
    WeightFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
