use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("tape already consumed")]
    TapeConsumed,
    #[error("graph contains non-twice-differentiable primitive `{op}` at node {node}")]
    NotTwiceDifferentiable { node: usize, op: &'static str },
    #[error("power iteration did not converge in {iters} iterations (rayleigh {rayleigh}, residual {residual})")]
    NonConvergence {
        iters: usize,
        rayleigh: f64,
        residual: f64,
    },
    #[error("well-posedness violated: 1 + tr(xi)/tr(H) = {value}")]
    WellPosedness { value: f64 },
    #[error("non-finite activation at encoder layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("non-finite {stage} at step {step}")]
    NonFiniteStep { step: usize, stage: &'static str },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
