//! Error types shared across the engine.

use thiserror::Error;

use crate::net::ParamId;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or wiring inconsistency (batch width vs input width, matrix dims).
    #[error("topology error: {0}")]
    Topology(String),

    /// Unknown task, head, or column.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Bad sample data (label out of range, empty dataset).
    #[error("data error: {0}")]
    Data(String),

    /// A cached artifact no longer matches the live object (stale trace).
    #[error("state error: {0}")]
    State(String),

    /// A parameter update produced a non-finite value.
    #[error("numerical error at {param:?}: {message}")]
    Numerical { param: ParamId, message: String },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// An operation would violate a structural constraint (e.g. pruning
    /// nodes that later tasks depend on without an explicit override).
    #[error("constraint error: {0}")]
    Constraint(String),

    /// Growth beyond the configured capacity limit.
    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Corrupt or incompatible serialized state.
    #[error("persist error: {0}")]
    Persist(String),
}

pub type Result<T> = std::result::Result<T, Error>;
