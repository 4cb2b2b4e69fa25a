use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("matrix assembly failed at cell ({row}, {col}): {reason}")]
    Assembly {
        row: usize,
        col: usize,
        reason: String,
    },

    #[error("spectral computation failed: {0}")]
    Spectral(String),

    #[error("eigenvalue degeneracy: {0}")]
    Degeneracy(String),

    #[error("no matching eigenvalue: {0}")]
    NotFound(String),

    #[error("linear algebra error: {0}")]
    LinearAlgebra(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("degenerate objective: {0}")]
    DegenerateObjective(String),

    #[error(
        "perturbation step too large: requested {requested}, maximum admissible {max_admissible}"
    )]
    StepTooLarge { requested: f64, max_admissible: f64 },

    #[error("singular quantity: {0}")]
    Singularity(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("file format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::LinearAlgebra(e.to_string())
    }
}
