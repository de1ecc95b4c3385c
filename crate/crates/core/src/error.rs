use thiserror::Error;

pub type Result<T> = std::result::Result<T, MsfrError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MsfrError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank constraint violated: q + sum(q_s) = {total} exceeds p = {p}{detail}")]
    RankConstraintViolated { total: usize, p: usize, detail: String },

    #[error("non-finite value in study {study} at row {row}, column {col}")]
    NonFiniteData { study: String, row: usize, col: usize },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("too few subjects: {0}")]
    TooFewSubjects(String),

    #[error("no grid point converged ({0} attempted)")]
    AllFitsFailed(usize),

    #[error("parse error in {file}:{line}: {message}")]
    ParseError { file: String, line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl MsfrError {
    /// Stable machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            MsfrError::ShapeMismatch(_) => "ShapeMismatch",
            MsfrError::RankConstraintViolated { .. } => "RankConstraintViolated",
            MsfrError::NonFiniteData { .. } => "NonFiniteData",
            MsfrError::SingularSystem(_) => "SingularSystem",
            MsfrError::DegenerateInput(_) => "DegenerateInput",
            MsfrError::TooFewSubjects(_) => "TooFewSubjects",
            MsfrError::AllFitsFailed(_) => "AllFitsFailed",
            MsfrError::ParseError { .. } => "ParseError",
            MsfrError::InvalidArgument(_) => "InvalidArgument",
            MsfrError::Io(_) => "Io",
        }
    }
}

impl From<std::io::Error> for MsfrError {
    fn from(e: std::io::Error) -> Self {
        MsfrError::Io(e.to_string())
    }
}
