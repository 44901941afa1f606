use thiserror::Error;

/// Errors produced by the library.
///
/// Every variant maps onto a stable machine-readable `kind` string (see
/// [`Error::kind`]) used by the CLI error objects and the C ABI status codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("condition violated: {0}")]
    ConditionViolated(String),

    #[error("unsupported ensemble: {0}")]
    UnsupportedEnsemble(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("missing uniform bounds: every factor needs an almost-sure norm bound b_i")]
    MissingUniformBounds,

    #[error("enumeration infeasible: {required} outcomes required, budget is {budget}")]
    EnumerationInfeasible { required: f64, budget: u64 },

    #[error("invalid construction: {0}")]
    InvalidConstruction(String),

    #[error("nothing to check: {0}")]
    NothingToCheck(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::ConditionViolated(_) => "condition-violated",
            Error::UnsupportedEnsemble(_) => "unsupported-ensemble",
            Error::Unsupported(_) => "unsupported",
            Error::MissingUniformBounds => "missing-uniform-bounds",
            Error::EnumerationInfeasible { .. } => "enumeration-infeasible",
            Error::InvalidConstruction(_) => "invalid-construction",
            Error::NothingToCheck(_) => "nothing-to-check",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
