use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("{path}:{line}: {message}")]
    Csv {
        path: String,
        line: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model does not support this filter: {0}")]
    Inapplicable(String),
    #[error("all particle weights underflowed to zero")]
    DegenerateLikelihood,
    #[error("at step k={k}: {source}")]
    AtStep {
        k: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn at_step(self, k: usize) -> Self {
        Error::AtStep {
            k,
            source: Box::new(self),
        }
    }

    /// True for failures of the numerical kind (singular matrices, NaN,
    /// divergence), as opposed to configuration or I/O problems.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numerics(_)
            | Error::DegenerateGeometry(_)
            | Error::DegenerateLikelihood
            | Error::Divergence { .. } => true,
            Error::AtStep { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
