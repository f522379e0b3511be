use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("leaf node {0} has no bound value")]
    UnboundLeaf(usize),
    #[error("non-finite value produced at node {node}")]
    NonFinite { node: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("dense Hessian requested for p = {0} (limit 64)")]
    TooLarge(usize),

    #[error("invalid eigenvalue range [{lo}, {hi}]")]
    InvalidSpectrum { lo: f64, hi: f64 },
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("IDX file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("IDX image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("dataset has no training samples")]
    EmptyDataset,
    #[error("invalid batch schedule: {0}")]
    InvalidBatch(String),

    #[error("SGLD chain diverged (|theta'| = {norm:e})")]
    ChainDiverged { norm: f64 },
    #[error("quadrature grid too narrow: boundary/peak log-ratio {log_ratio:.3}")]
    GridTooNarrow { log_ratio: f64 },
    #[error("invalid estimator argument: {0}")]
    InvalidArgument(String),

    #[error("every learning-rate candidate diverged")]
    AllDiverged,
    #[error("unroll diverged at step {0}")]
    UnrollDiverged(usize),
    #[error("meta-training diverged after {0} consecutive failed unrolls")]
    MetaDiverged(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown metric '{0}'")]
    UnknownMetric(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
