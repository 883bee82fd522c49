//! Error types shared across the crate.

use thiserror::Error;

use crate::batch::Violation;

/// Errors from pure core operations (batch-time evaluation, validation).
#[derive(Debug, Error, PartialEq)]
pub enum CoreError {
    #[error("token_load must be >= 1; idle slots are handled by the engine")]
    EmptyBatch,
    #[error("plan references request {0} which is not in the queue")]
    UnknownRequest(u64),
    #[error("plan contains more than one entry for request {0}")]
    DuplicateEntry(u64),
    #[error("plan token_load {stated} does not match entry sum {actual}")]
    TokenLoadMismatch { stated: u64, actual: u64 },
    #[error("batch-time variant requires per-entry plan context but none was supplied")]
    MissingPlanContext,
    #[error("fluid model has no finite emptying time: rho = {rho} >= 1")]
    Overloaded { rho: f64 },
    #[error("trace has {got} samples but at least {need} are required")]
    TooFewSamples { got: usize, need: usize },
}

/// Configuration validation errors. The CLI maps these to exit code 2.
#[derive(Debug, Error, PartialEq)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError(msg.into())
    }
}

/// Fatal simulation errors. Feasibility violations indicate a policy bug
/// and map to exit code 3 in the CLI.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("scheduler produced an infeasible plan on engine {engine} at slot {slot}: {violations:?}")]
    PolicyViolation {
        engine: u32,
        slot: u64,
        violations: Vec<Violation>,
    },
    #[error("work-conserving scheduler on engine {engine} formed a partial batch ({token_load} < {budget}) at slot {slot} despite a feasible full batch")]
    WorkConservationViolation {
        engine: u32,
        slot: u64,
        token_load: u64,
        budget: u64,
    },
    #[error("scheduler plan error on engine {engine} at slot {slot}: {source}")]
    PlanStructure {
        engine: u32,
        slot: u64,
        source: CoreError,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
}
