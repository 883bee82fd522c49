//! slotsim — a discrete-time queueing simulator for LLM inference serving.
//!
//! The simulator models an inference engine as a slotted-time batch queue:
//! requests bring prefill and decode tokens, a scheduler packs tokens into
//! iterations under a token budget, and a batch-time model maps the token
//! load of an iteration to a processing duration in slots. On top of the
//! single engine sit multi-engine topologies (parallel pools behind a load
//! balancer, tandem pipelines, fork-join workflows, and a two-agent
//! priority network) for multi-step agent workloads.
//!
//! # Layout
//!
//! * [`request`] / [`batch`] — domain types, batch-time models, and the
//!   batch feasibility validator.
//! * [`workload`] — seeded random generation of arrivals and token sizes.
//! * [`queue`] — the per-engine FCFS request queue with phase/type indices.
//! * [`scheduler`] — the pluggable batch-forming policies.
//! * [`engine`] — the slot-by-slot dynamics of one engine.
//! * [`network`] — multi-engine topologies, routing, and hand-offs.
//! * [`analysis`] — load factors, workload diagnostics, stability verdicts,
//!   and latency summaries.
//! * [`experiment`] — config-driven end-to-end runs producing traces,
//!   per-request records, and per-engine summaries.

pub mod analysis;
pub mod batch;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod network;
pub mod queue;
pub mod request;
pub mod scheduler;
pub mod workload;

pub use analysis::{
    detect_stability, fluid_time_to_empty, load_factor, lyapunov_workload, summarize_latency,
    Classification, EngineLoad, LatencySummary, StabilityParams, StabilityVerdict, TraceSample,
};
pub use batch::{
    batch_duration_slots, validate_batch, BatchPlan, BatchTimeModel, BatchValidation, EntryContext,
    MemoryOverheadModel, PlanEntry, Violation, ViolationRule,
};
pub use engine::{Counters, Engine, EngineConfig, Limit};
pub use error::{ConfigError, CoreError, SimError};
pub use experiment::{run_experiment, EngineReport, ExperimentConfig, RequestRecord, RunOutput};
pub use network::{Balancer, JoinBuffer, Network, Topology, TopologyKind};
pub use queue::{RequestQueue, TypeFilter};
pub use request::{Phase, Request, RequestId};
pub use scheduler::{
    is_work_conserving_feasible, PhasePriority, SchedulerSpec, SchedulerState,
};
pub use workload::{ArrivalProcess, Distribution, RequestTypeSpec, StageSpec, WorkloadSpec};
