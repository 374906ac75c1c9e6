use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected} values, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("materializing a {rows}x{cols} matrix exceeds the cap of {cap} entries")]
    MaterializeCap { rows: usize, cols: usize, cap: usize },

    #[error("rank deficient input to QR: pivot {pivot:e} at column {column}")]
    RankDeficient { column: usize, pivot: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("clipping stopped after {iterations} outer iterations with sigma_1 = {sigma} > target {target}")]
    ClipNotConverged {
        iterations: usize,
        sigma: f64,
        target: f64,
    },

    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },

    #[error("spectrum graft is ill-posed: singular value {index} is zero but its target is {target}")]
    IllPosedGraft { index: usize, target: f64 },

    #[error("no adversarial example found for sample {index} up to eps = {eps}")]
    AttackExhausted { index: usize, eps: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("infeasible moment target {target}: must lie strictly inside ({min}, {max})")]
    Infeasible { target: f64, min: f64, max: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty class {0} in evaluation set")]
    EmptyClass(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
