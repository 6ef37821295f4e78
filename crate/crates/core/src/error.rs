use thiserror::Error;

use crate::dreem::RoundRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {what} = {index}, limit {limit}")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("episode is over; reset before stepping")]
    EpisodeOver,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error(
        "trajectory too short: need {needed} transitions from the start index, have {available}"
    )]
    TrajectoryTooShort { needed: usize, available: usize },

    #[error("matrix has numerical rank {rank}, larger than the requested {target}")]
    Infeasible { rank: usize, target: usize },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("volume shrink trigger not met: {0}")]
    TriggerNotMet(String),

    #[error("version space emptied after {} rounds", history.len())]
    EliminationFailure { history: Vec<RoundRecord> },

    #[error("round budget is not positive (beta {beta} <= 2*phi {two_phi})")]
    NonPositiveRounds { beta: f64, two_phi: f64 },

    #[error("no policy returned after {iterations} outer iterations")]
    NoConvergence { iterations: usize },

    #[error("training diverged for ensemble member {member}")]
    TrainingDiverged { member: usize },

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("episode grids do not align: {0}")]
    Alignment(String),

    #[error("agent failed on seed {seed}: {message}")]
    AgentFailure { seed: u64, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
