use thiserror::Error;

/// Errors raised by grid construction, model evaluation, solvers and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("matrix outside admissible set at node {node:?}: operator norm {norm} exceeds {bound}")]
    Inadmissible {
        node: Option<Vec<usize>>,
        norm: f64,
        bound: f64,
    },

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("invalid ball family: {0}")]
    BallFamily(String),

    #[error("region mismatch: {0}")]
    RegionMismatch(String),

    #[error("eigenvalue iteration did not converge after {0} sweeps")]
    EigenNoConvergence(usize),

    #[error("coefficient tensor fails the Legendre condition (smallest eigenvalue {0})")]
    NotElliptic(f64),

    #[error("conjugate gradients stagnated after {iterations} iterations (relative residual {residual})")]
    CgStagnation { iterations: usize, residual: f64 },

    #[error("line search failed at iteration {0}")]
    LineSearch(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
