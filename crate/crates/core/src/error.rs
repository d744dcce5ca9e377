use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dangling endpoint: edge {from} -> {to} references unknown node {missing:?}")]
    DanglingEndpoint {
        from: String,
        to: String,
        missing: String,
    },
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("node {node:?}: {reason}")]
    InvalidNode { node: String, reason: String },
    #[error("edge {from} -> {to}: {reason}")]
    InvalidEdge {
        from: String,
        to: String,
        reason: String,
    },
    #[error("topology declared acyclic but contains a cycle through {0:?}")]
    Cycle(String),
    #[error("topology is not a linear chain: {0}")]
    NotAChain(String),
    #[error("release {value} on node {node:?} outside [0, {a_max}]")]
    ActionOutOfRange { node: String, value: f64, a_max: f64 },
    #[error("action set shape mismatch: {0}")]
    ActionShape(String),
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("neighbor set is empty")]
    EmptyNeighborSet,
    #[error("weights off simplex: align {align}, sep {sep}, coh {coh} (sum {sum})")]
    OffSimplex {
        align: f64,
        sep: f64,
        coh: f64,
        sum: f64,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite gradient in parameter {0:?}; update aborted")]
    NonFiniteGradient(String),
    #[error("malformed directive: {0}")]
    MalformedDirective(String),
    #[error("missing field {0:?}")]
    MissingField(String),
    #[error("rulebook has no entry for event kind {kind} in mode {mode}")]
    RulebookGap { kind: String, mode: String },
    #[error("guidance provider failed: {0}")]
    Provider(String),
    #[error("schema mismatch in {path}: {reason}")]
    Schema { path: PathBuf, reason: String },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("timestamps not strictly increasing for node {node:?} at {at}")]
    NonMonotoneTimestamps { node: String, at: String },
    #[error("unknown node id {0:?}")]
    UnknownNode(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
