use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite or exploding iterate at t = {t}")]
    NonFinite { t: f64 },
    #[error("symmetry residual {residual:e} exceeds tolerance at t = {t}")]
    SymmetryLoss { t: f64, residual: f64 },
    #[error("driver is not deterministic: {0}")]
    NonDeterministicDriver(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("regularization diverged: {0}")]
    RegularizationDiverged(String),
    #[error("M1 not positive definite at t = {t} (channel {channel})")]
    M1NotPD { t: f64, channel: usize },
    #[error("{what} is singular or ill-conditioned (cond {cond:e}) at t = {t}")]
    Singular { what: String, t: f64, cond: f64 },
    #[error("I - Q C is singular at t = {t}")]
    SingularIminusQC { t: f64 },
    #[error("P3 singular at t = {t}")]
    P3Singular { t: f64 },
    #[error("fixed point diverged after {sweeps} sweeps (residual {residual:e})")]
    FixedPointDiverged { sweeps: usize, residual: f64 },
    #[error("{excluded} of {paths} paths non-finite (first: path {path}, step {step})")]
    NonFinitePaths { excluded: usize, paths: usize, path: usize, step: usize },
    #[error("validation failed:\n{}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<crate::model::Violation>),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
