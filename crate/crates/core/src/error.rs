use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input data, bad files or violated input contracts.
    Data,
    /// Factorization or optimization failure on otherwise valid input.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty bin [{lo}, {hi}) for {context}")]
    EmptyBin { lo: f64, hi: f64, context: String },

    #[error("variable `{variable}` has zero variance across environments")]
    ZeroVariance { variable: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("kernel averaging weights sum to zero")]
    DegenerateWeights,

    #[error("matrix `{name}` is not positive semidefinite (min eigenvalue {min_eig:.3e}, max eigenvalue {max_eig:.3e})")]
    NotPsd {
        name: String,
        min_eig: f64,
        max_eig: f64,
    },

    #[error("design error: {0}")]
    Design(String),

    #[error("infeasible sparse-testing design: {0}")]
    InvalidDesign(String),

    #[error("unknown {kind} label `{label}`")]
    Lookup { kind: &'static str, label: String },

    #[error("{path}: row {row}, column `{column}`: {message}")]
    Parse {
        path: String,
        row: usize,
        column: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },

    #[error("degenerate simulation truth: {0}")]
    DegenerateTruth(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Numerical(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
