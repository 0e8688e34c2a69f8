use thiserror::Error;

/// Errors raised by the solvers, the simulator and the optimizer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("fixed-point iteration did not converge at stage {stage} after {iterations} iterations (residual {residual:.3e})")]
    Convergence {
        stage: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("covariance of the stage fields is not positive definite at stage {stage} (pivot {pivot:.3e})")]
    IllConditioned { stage: usize, pivot: f64 },

    #[error("bias root not bracketed at stage {stage} after {expansions} expansions")]
    BiasSolve { stage: usize, expansions: usize },

    #[error("degenerate denominator at stage {stage}: {what} = {value:.3e}")]
    Degenerate {
        stage: usize,
        what: &'static str,
        value: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported regime: {0}")]
    Unsupported(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("stage {stage}: {source}")]
    AtStage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn at_stage(self, stage: usize) -> Self {
        Error::AtStage {
            stage,
            source: Box::new(self),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
