use thiserror::Error;

use crate::categorical::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("logits contain a non-finite value at index {0}")]
    NonFiniteLogits(usize),
    #[error("temperature must be finite and non-negative, got {0}")]
    InvalidTemperature(f64),
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),
    #[error("cannot sample from an exhausted (all-zero) distribution")]
    EmptySupport,
    #[error("vocabulary mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: usize, found: usize },
    #[error("token {0} is outside the vocabulary")]
    TokenOutOfRange(TokenId),
    #[error("token {token} was already sampled at this position")]
    DuplicateToken { token: TokenId },
    #[error("token {token} has zero probability at this position")]
    ZeroProbabilityToken { token: TokenId },
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("position {0} has no draft distribution attached")]
    PositionNotOpen(String),
    #[error("speculative budget must be at least 1")]
    ZeroBudget,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("missing target distribution for position {0}")]
    MissingTargetDistribution(String),
    #[error("target residual collapsed to zero after rejecting token {0}")]
    ResidualCollapsed(TokenId),
    #[error("acceptance probability {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("enumeration exceeded the cap of {cap} subtrees")]
    EnumerationCapExceeded { cap: u64 },
    #[error("permutation is not a topological order of the tree")]
    NonTopologicalPermutation,
    #[error("attention row {0} has no unmasked entries")]
    NoUnmaskedEntries(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input: {0}")]
    Empty(String),
}
