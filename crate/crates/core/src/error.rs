use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or values that break a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The point is on or outside the boundary of the open polytope.
    #[error("outside domain: constraint {index} has margin {margin:e}")]
    OutsideDomain { index: usize, margin: f64 },

    /// No strictly feasible input exists (or none was found by the search).
    #[error("infeasible constraint system (best max-margin {max_margin:e})")]
    Infeasible { max_margin: f64 },

    /// The search ended with a max-margin inside the ambiguous tolerance band.
    #[error("feasibility indeterminate (best max-margin {max_margin:e})")]
    Indeterminate { max_margin: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged: loss is NaN at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors reporting that no strictly feasible input exists.
    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::Infeasible { .. } | Error::Indeterminate { .. })
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let location = match err.position() {
            Some(pos) => format!("line {} (byte {})", pos.line(), pos.byte()),
            None => "unknown position".to_string(),
        };
        Error::Parse {
            location,
            message: err.to_string(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        if err.is_io() {
            return Error::Io(err.into());
        }
        Error::Parse {
            location: format!("line {} column {}", err.line(), err.column()),
            message: err.to_string(),
        }
    }
}
