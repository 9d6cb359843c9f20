use thiserror::Error;

/// Errors produced by the modeling, solver, and simulation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("network topology error: {0}")]
    Topology(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Load exceeds what the network can physically deliver (no real
    /// voltage solution, or the solver cannot restore feasibility).
    #[error("infeasible load: {0}")]
    InfeasibleLoad(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    /// Argument outside the strictly-increasing range of an invertible map.
    #[error("value {value} outside invertible range ({lo}, {hi}): {msg}")]
    Range {
        value: f64,
        lo: f64,
        hi: f64,
        msg: String,
    },

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("unsupported setting: {0}")]
    UnsupportedSetting(String),

    /// Offered load at or above capacity where stability is required.
    #[error("unstable configuration: {0}")]
    Unstable(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
