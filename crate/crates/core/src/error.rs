use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RomError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RomError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("deformation parameter {index} = {value} outside admissible box [-{bound}, {bound}]")]
    DeformationOutOfRange { index: usize, value: f64, bound: f64 },

    #[error("deformation produces non-positive cell area {area} at cell ({i}, {j})")]
    NonPositiveArea { i: usize, j: usize, area: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("time step {dt} violates CFL bound (courant number {courant} > {limit})")]
    CflViolation { dt: f64, courant: f64, limit: f64 },

    #[error("full-order solution diverged at step {step}: {field} norm {norm}")]
    Diverged { step: usize, field: &'static str, norm: f64 },

    #[error("linear solver stalled after {iterations} iterations (residual {residual:e})")]
    LinearSolver { iterations: usize, residual: f64 },

    #[error("steady iteration not converged after {steps} steps (relative change {change:e})")]
    SteadyNotConverged { steps: usize, change: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("requested rank {requested} exceeds numerical rank {achievable}")]
    RankDeficient { requested: usize, achievable: usize },

    #[error("bases are not hierarchical: {0}")]
    NonHierarchical(String),

    #[error("empty dataset split: {0}")]
    EmptySplit(&'static str),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("singular Jacobian (reciprocal condition {rcond:e}, residual {residual:e})")]
    SingularJacobian { rcond: f64, residual: f64 },

    #[error("Newton iteration did not converge in {iterations} iterations (residual {residual:e})")]
    NewtonNotConverged { iterations: usize, residual: f64 },

    #[error("reference field has zero norm")]
    ZeroReference,

    #[error("archive format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl RomError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RomError::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        RomError::Format { path: path.into(), reason: reason.into() }
    }
}
