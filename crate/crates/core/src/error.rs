//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any maskedkrum operation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },

    #[error("negative variance at coordinate {index}: {value}")]
    NegativeVariance { index: usize, value: f64 },

    #[error("N >= 2f+3 violated: N={n}, f={f}")]
    ResilienceViolated { n: usize, f: usize },

    #[error("cannot orthogonalize {n} vectors in fewer than {n} dimensions (dim={dim})")]
    RankDeficient { n: usize, dim: usize },

    #[error(
        "degenerate draw: residual norm {residual:e} below threshold after {attempts} attempts"
    )]
    DegenerateDraw { residual: f64, attempts: u32 },

    #[error("select k out of range: k={k}, n={n}")]
    SelectKOutOfRange { k: usize, n: usize },

    #[error("distance matrix asymmetric at ({i},{j}): {left} vs {right}")]
    AsymmetricMatrix {
        i: usize,
        j: usize,
        left: f64,
        right: f64,
    },

    #[error("distance matrix has negative entry at ({i},{j}): {value}")]
    NegativeDistance { i: usize, j: usize, value: f64 },

    #[error("worker id mismatch: expected worker {expected}, got worker {got}")]
    WorkerIdMismatch { expected: u8, got: u8 },

    #[error("need at least {need} share vectors, got {got}")]
    TooFewShares { need: usize, got: usize },

    #[error("missing gradient for selected client {0}")]
    MissingGradient(u32),

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("empty dataset for client {0}")]
    EmptyDataset(u32),

    #[error("authentication failure: {context}")]
    AuthFailure { context: String },

    #[error("no session key for {local} <-> {peer}")]
    NoSessionKey { local: String, peer: String },

    #[error("unexpected payload {kind} delivered to {role}")]
    UnexpectedPayload { kind: &'static str, role: String },

    #[error("codebook format: {0}")]
    CodebookFormat(String),

    #[error("wire format: {0}")]
    WireFormat(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("round failed precondition: {participants} participants < 2f+3 = {required}")]
    RoundPrecondition {
        participants: usize,
        required: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
