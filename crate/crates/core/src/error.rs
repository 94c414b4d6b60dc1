use thiserror::Error;

#[derive(Debug, Error)]
pub enum FadeError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid segment: {0}")]
    InvalidSegment(String),

    #[error("invalid delay measure: {0}")]
    InvalidMeasure(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("moment of order {kappa} diverges for exponential decay {beta}")]
    DivergentMoment { kappa: f64, beta: f64 },

    #[error("no finite memory window achieves tolerance {tol}")]
    NoWindow { tol: f64 },

    #[error("integration diverged at step {step} (t = {time})")]
    Diverged { step: usize, time: f64 },

    #[error("run started at −{start} diverged at step {step} (t = {time})")]
    StartDiverged { start: f64, step: usize, time: f64 },

    #[error("model refused: dissipativity margin {margin} is not positive at eps = {eps}")]
    UnstableModel { margin: f64, eps: f64 },

    #[error("diffusion is singular at t = {time} (smallest singular value {min_singular})")]
    SingularDiffusion { time: f64, min_singular: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("importance weight overflow (log-weight {log_weight}); use a smaller tilt or larger eps")]
    WeightOverflow { log_weight: f64 },

    #[error("time {time} is outside the grid [{lo}, {hi}]")]
    OutOfRange { time: f64, lo: f64, hi: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("infeasible rate problem: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FadeError>;
