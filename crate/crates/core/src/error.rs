use thiserror::Error;

/// Errors produced across synthesis, simulation and the open-loop oracle.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("pair (A, B) is not stabilizable: eigenvalue {re:+.6e}{im:+.6e}i is uncontrollable")]
    Unstabilizable { re: f64, im: f64 },

    #[error("matrix is not Hurwitz (spectral abscissa {0:+.6e})")]
    NotHurwitz(f64),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("residual {residual:.3e} exceeds tolerance {tol:.3e} ({what})")]
    Residual {
        what: String,
        residual: f64,
        tol: f64,
    },

    #[error("order {order}: {source}")]
    AtOrder {
        order: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("trajectory diverged at t = {time:.6e} (|y| = {norm:.3e})")]
    Diverged { time: f64, norm: f64 },

    #[error("study failed: {0}")]
    Study(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_order(order: usize) -> impl FnOnce(Error) -> Error {
        move |source| Error::AtOrder {
            order,
            source: Box::new(source),
        }
    }

    /// The innermost error, skipping order annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtOrder { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
