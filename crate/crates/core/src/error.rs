use thiserror::Error;

use crate::mdp::{ActionId, StateVector};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("action {action} is not enabled in state {state}")]
    ActionNotEnabled { state: StateVector, action: ActionId },

    #[error("cost at {state} / {action} is not a finite non-negative number: {value}")]
    InvalidCost {
        state: StateVector,
        action: ActionId,
        value: f64,
    },

    #[error("gamma must lie in [0, 1], got {0}")]
    InvalidGamma(f64),

    #[error("policy is undefined at reachable state {0}")]
    PolicyUndefined(StateVector),

    #[error("policy chooses {action} in {state}, which is not enabled there")]
    PolicyChoiceInvalid { state: StateVector, action: ActionId },

    #[error("markov chain is not unichain (stationary system is singular)")]
    NotUnichain,

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: u64, residual: f64 },

    #[error("prior for {state} / {action} is already initialized")]
    AlreadyInitialized { state: StateVector, action: ActionId },

    #[error("successor {successor} of {state} / {action} is not a template candidate")]
    SuccessorNotInTemplate {
        state: StateVector,
        action: ActionId,
        successor: StateVector,
    },

    #[error("estimator structure mismatch at {state} / {action}: {reason}")]
    StructureMismatch {
        state: StateVector,
        action: ActionId,
        reason: String,
    },

    #[error("abstraction exceeds the transition budget of {budget}")]
    BudgetExceeded { budget: usize },

    #[error("invalid cut-off function: {0}")]
    InvalidCutoff(String),

    #[error("invalid mdp: {0}")]
    InvalidMdp(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed snapshot: {0}")]
    MalformedSnapshot(String),

    #[error("snapshot version {found} does not match expected {expected}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
