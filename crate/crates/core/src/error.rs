use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error{}: {message}", study.as_ref().map(|s| format!(" in study '{s}'")).unwrap_or_default())]
    Validation {
        study: Option<String>,
        message: String,
    },

    #[error("covariance of study '{study}' is not positive definite: {message}")]
    NotPositiveDefinite { study: String, message: String },

    #[error("multi-arm study '{0}' has no shared-arm variance")]
    MissingCovariance(String),

    #[error("study '{0}' is unpublished and has no outcomes")]
    Unpublished(String),

    #[error("marginal covariance of study '{0}' is singular")]
    SingularCovariance(String),

    #[error("optimizer failed to converge: {0}")]
    NonConvergence(String),

    #[error("unknown treatment '{0}'")]
    UnknownTreatment(String),

    #[error("every study is published; the selection model is not identified")]
    AllPublished,

    #[error("estimating equations have no root: {0}")]
    NoRoot(String),

    #[error("bootstrap aborted: {dropped} of {requested} replicates failed")]
    TooManyFailures { dropped: usize, requested: usize },

    #[error("standard error unavailable for contrast {0} vs {1}")]
    MissingSe(String, String),

    #[error("need at least 3 published comparisons, found {0}")]
    TooFewStudies(usize),

    #[error("simulation aborted: {0}")]
    Simulation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(study: impl Into<Option<String>>, message: impl Into<String>) -> Self {
        Error::Validation {
            study: study.into(),
            message: message.into(),
        }
    }

    /// True for failures of the numerical machinery rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularCovariance(_)
                | Error::NonConvergence(_)
                | Error::NoRoot(_)
                | Error::TooManyFailures { .. }
                | Error::Simulation(_)
        )
    }
}
