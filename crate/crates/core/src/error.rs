use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric cell in row {row}, column `{column}`: {value:?}")]
    NonNumeric { row: usize, column: String, value: String },

    #[error("invalid treatment value {value} in row {row}")]
    InvalidTreatment { row: usize, value: f64 },

    #[error("outcome out of range for kind {kind} in row {row}: {value}")]
    OutcomeOutOfRange { row: usize, kind: &'static str, value: f64 },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{0} arm empty")]
    EmptyArm(&'static str),

    #[error("propensity model did not converge after {iterations} iterations (max |mean score| = {max_score:e})")]
    NonConvergence { iterations: usize, max_score: f64 },

    #[error("complete or quasi-complete separation in propensity model (|eta| = {norm:e})")]
    Separation { norm: f64 },

    #[error("positivity failure: fitted propensity {value:e} within 1e-12 of the boundary")]
    Positivity { value: f64 },

    #[error("weight overflow: weight {value:e} exceeds 1e12")]
    WeightOverflow { value: f64 },

    #[error("non-estimable replicate: arm {arm} mean {mean} outside the {link} link domain")]
    NonEstimable { arm: u8, mean: f64, link: &'static str },

    #[error("singular {what} (pivot {pivot})")]
    Singular { what: &'static str, pivot: usize },

    #[error("meat matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("bootstrap aborted: {failures} of {requested} resamples unrecoverable")]
    BootstrapAborted { failures: usize, requested: usize },

    #[error("empty distribution")]
    EmptyDistribution,

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
}

impl Error {
    /// True for failures of the numerical pipeline itself, as opposed to bad
    /// user input or unreadable files.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::Separation { .. }
                | Error::Positivity { .. }
                | Error::WeightOverflow { .. }
                | Error::NonEstimable { .. }
                | Error::Singular { .. }
                | Error::NotPsd { .. }
                | Error::BootstrapAborted { .. }
                | Error::EmptyDistribution
        )
    }
}
