use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Malformed input: bad dimensions, unsorted subsets, out-of-range ranks.
    #[error("validation error: {0}")]
    Validation(String),

    /// Argument outside the mathematical domain of the operation, e.g. `Im z <= 0`.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("binomial coefficient C({n}, {k}) overflows u64")]
    Overflow { n: u64, k: u64 },

    /// A configured size or enumeration budget would be exceeded.
    #[error("resource limit: {what} needs {requested}, cap is {cap}")]
    Resource {
        what: &'static str,
        requested: u128,
        cap: u128,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no convergence after {iterations} iterations (last change {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    /// A property that holds mathematically was observed to fail.
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Process exit status for the CLI: 1 for bad input or exhausted limits,
    /// 2 for a violated mathematical property, 3 for solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Domain(_) | Error::Overflow { .. } | Error::Resource { .. } => 1,
            Error::Invariant(_) => 2,
            Error::Numeric(_) | Error::NonConvergence { .. } => 3,
        }
    }
}
