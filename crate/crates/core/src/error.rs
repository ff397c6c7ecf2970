use thiserror::Error;

/// Errors raised by model construction and the numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown catalog model `{0}` (expected one of M1, M2, M3-point, M4)")]
    UnknownModel(String),

    #[error("parameter {param} = {value} is outside the admissible region: {reason}")]
    Inadmissible {
        param: String,
        value: f64,
        reason: String,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("uniform ergodicity (A1) violated: {0}")]
    UniformErgodicity(String),

    #[error("vector is not stationary for the kernel (residual {residual:.3e})")]
    NotStationary { residual: f64 },

    #[error("observation {index} has zero probability under every hidden state")]
    ZeroProbability { index: usize },

    #[error("observation value {0} is not in the emission alphabet")]
    InvalidObservation(f64),

    #[error("enumeration requires finite alphabet ({0})")]
    RequiresFiniteAlphabet(&'static str),

    #[error("{what} too large: {size} exceeds the limit {limit}")]
    TooLarge {
        what: &'static str,
        size: f64,
        limit: f64,
    },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("singular information: {0}")]
    SingularInformation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
