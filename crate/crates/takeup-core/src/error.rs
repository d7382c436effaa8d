use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("missing covariate `{label}`")]
    MissingCovariate { label: String },

    #[error("numerical underflow in household `{household}`: marginal likelihood {value:e}")]
    Underflow { household: String, value: f64 },

    #[error("log-likelihood is not finite at the starting point; supply a feasible start")]
    NonFiniteStart,

    #[error("Hessian is not negative definite (offending eigenvalue {eigenvalue})")]
    HessianNotNegativeDefinite { eigenvalue: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("CSV parse error at line {line}: {message}")]
    CsvParse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
