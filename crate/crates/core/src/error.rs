use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure at t = {t}: {msg}")]
    Numerical { t: f64, msg: String },

    #[error("solver exceeded {max_steps} steps at t = {t}")]
    Divergence { max_steps: usize, t: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no comparable pairs")]
    NoComparablePairs,

    #[error("censoring survival is zero for subjects {0:?}")]
    DegenerateWeight(Vec<String>),

    #[error("subject {id}: {source}")]
    Subject {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input rather than numerics or I/O.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Dimension(_)
            | Error::Contract(_)
            | Error::Domain(_)
            | Error::Json(_) => true,
            Error::Subject { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    /// True for numerical failures (solver blow-up, non-finite losses).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical { .. } | Error::Divergence { .. } | Error::NonFiniteLoss { .. } => {
                true
            }
            Error::Subject { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
