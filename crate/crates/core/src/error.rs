use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum CtdgError {
    #[error("event log not time-sorted: event {index} precedes its predecessor")]
    UnsortedLog { index: usize },

    #[error("node index {node} out of range (n = {n})")]
    NodeOutOfRange { node: usize, n: usize },

    #[error("event {index} is a self-event on node {node}")]
    SelfEvent { index: usize, node: usize },

    #[error("event {index}: {reason}")]
    InvalidEvent { index: usize, reason: String },

    #[error("line {line}: {reason}")]
    Csv { line: u64, reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("power iteration did not converge after {iters} iterations (last estimate {estimate})")]
    NotConverged { estimate: f64, iters: usize },

    #[error("time regression on node {node}: event at {time} precedes last update {last}")]
    TimeRegression { node: usize, time: f64, last: f64 },

    #[error("configuration is not in theorem mode: {0}")]
    NotTheoremMode(String),

    #[error("parameters outside the bound's admissible region: {0}")]
    Inadmissible(String),

    #[error("infeasible specification: {0}")]
    Infeasible(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("parameter file: {0}")]
    ParamFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CtdgError>;
