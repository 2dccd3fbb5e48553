use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("matrix is not Hermitian at ({row}, {col}): asymmetry {asymmetry:e}")]
    NotHermitian { row: usize, col: usize, asymmetry: f64 },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("linear solve residual {0:e} exceeds tolerance")]
    IllConditioned(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dual point is infeasible: lambda_min(F) = {lambda_min:e}")]
    InfeasibleDualPoint { lambda_min: f64 },
    #[error("quadratic form is materially complex (imag/real = {0:e})")]
    NonRealQuadraticForm(f64),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("scheme undefined: {0}")]
    SchemeUndefined(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
