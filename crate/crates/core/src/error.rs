use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A primitive or configuration parameter violates its invariants.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A geometric configuration where the requested quantity is ill-defined.
    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    /// Gradient requested at a point where it does not exist.
    #[error("gradient undefined: {0}")]
    GradientUndefined(String),

    /// Linear-algebra failure (singular matrix, failed factorization, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Metrics requested on a trace with no records.
    #[error("empty trace")]
    EmptyTrace,

    /// Scenario name not present in the built-in registry.
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    /// A scenario violates its own invariants (unsafe start, bad timing, ...).
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Trace file that does not follow the documented record layout.
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

pub type Result<T> = std::result::Result<T, Error>;
