//! The single-engine discrete-time dynamics.
//!
//! State per slot: remaining batch time `R`, the FCFS queue, and cumulative
//! counters. A slot proceeds as: (1) if `R = 0`, form and validate a batch,
//! debit its tokens from the queue, and set `R` to the batch duration;
//! (2) decrement `R`; (3) if `R` hits zero, commit the batch — counters
//! update, departures finalize; (4) append this slot's arrivals; (5) advance
//! the clock. Tokens in flight are excluded from per-request remaining
//! counts the moment the batch starts, but count as unprocessed work until
//! the commit, so the cumulative bookkeeping matches the balance identities
//! exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analysis::TraceSample;
use crate::batch::{
    batch_duration_slots, validate_batch, BatchTimeModel, BatchValidation, EntryContext,
    MemoryOverheadModel,
};
use crate::error::{ConfigError, SimError};
use crate::queue::{RequestQueue, TypeFilter};
use crate::request::{Request, RequestId};
use crate::scheduler::{SchedulerSpec, SchedulerState};

/// A request-count limit that may be unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Limit {
    Unbounded,
    Bounded(u64),
}

impl Limit {
    pub fn cap(&self) -> usize {
        match self {
            Limit::Unbounded => usize::MAX,
            Limit::Bounded(n) => *n as usize,
        }
    }

    pub fn is_unbounded(&self) -> bool {
        matches!(self, Limit::Unbounded)
    }
}

impl Default for Limit {
    fn default() -> Self {
        Limit::Unbounded
    }
}

impl Serialize for Limit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Limit::Unbounded => s.serialize_str("unbounded"),
            Limit::Bounded(n) => s.serialize_u64(*n),
        }
    }
}

impl<'de> Deserialize<'de> for Limit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(Limit::Bounded(n)),
            Raw::Word(w) if w == "unbounded" => Ok(Limit::Unbounded),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a count or \"unbounded\", got \"{w}\""
            ))),
        }
    }
}

fn default_request_batch_cap() -> Limit {
    Limit::Bounded(8)
}

/// Static configuration of one engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub token_budget: u64,
    pub batch_time: BatchTimeModel,
    #[serde(default)]
    pub memory_overhead: MemoryOverheadModel,
    #[serde(default)]
    pub k_prefill: Limit,
    #[serde(default)]
    pub k_decode: Limit,
    pub scheduler: SchedulerSpec,
    /// Cohort size for request-level batching (faster_transformer only).
    #[serde(default = "default_request_batch_cap")]
    pub request_batch_cap: Limit,
}

impl EngineConfig {
    pub fn validate(&self, n_types: usize) -> Result<(), ConfigError> {
        if self.token_budget < 1 {
            return Err(ConfigError::new("token_budget must be >= 1"));
        }
        self.batch_time.validate().map_err(ConfigError::new)?;
        self.memory_overhead.validate().map_err(ConfigError::new)?;
        if matches!(self.batch_time, BatchTimeModel::ConstantSlots { .. })
            && !self.memory_overhead.is_none()
        {
            return Err(ConfigError::new(
                "memory_overhead requires a millisecond batch_time variant, not constant_slots",
            ));
        }
        for (name, limit) in [
            ("k_prefill", self.k_prefill),
            ("k_decode", self.k_decode),
            ("request_batch_cap", self.request_batch_cap),
        ] {
            if let Limit::Bounded(0) = limit {
                return Err(ConfigError::new(format!("{name} must be >= 1 when bounded")));
            }
        }
        self.scheduler.validate(n_types)
    }

    /// Slots to process a full-budget batch; the capacity denominator.
    pub fn full_batch_slots(&self) -> u64 {
        batch_duration_slots(
            self.token_budget,
            Some(&[]),
            &self.batch_time,
            &MemoryOverheadModel::none(),
        )
        .expect("budget >= 1")
    }

    #[cfg(test)]
    pub(crate) fn test_default() -> Self {
        EngineConfig {
            token_budget: 256,
            batch_time: BatchTimeModel::ConstantSlots { t: 1 },
            memory_overhead: MemoryOverheadModel::none(),
            k_prefill: Limit::Unbounded,
            k_decode: Limit::Unbounded,
            scheduler: SchedulerSpec::Sarathi,
            request_batch_cap: default_request_batch_cap(),
        }
    }
}

/// Cumulative per-engine counters.
///
/// `unprocessed_decode_tokens` counts the decode debt of every request that
/// has arrived (so `unprocessed_prefill_tokens + unprocessed_decode_tokens`
/// is the total unprocessed token count whose divergence the theory talks
/// about); `revealed_decode_tokens` counts only the decode work of requests
/// whose prefill has completed, which is the quantity the balance
/// identities bound.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    /// Requests arrived (E).
    pub arrivals_requests: u64,
    /// Tokens completed per phase (B_p, B_d).
    pub completed_prefill_tokens: u64,
    pub completed_decode_tokens: u64,
    /// Requests that completed each phase (F_p, F_d).
    pub completed_prefill_requests: u64,
    pub completed_decode_requests: u64,
    /// Tokens brought by arrived requests (V_p(E), V_d(E)).
    pub arrived_prefill_tokens: u64,
    pub arrived_decode_tokens: u64,
    /// Decode tokens of requests whose prefill completed (V_d(F_p)).
    pub revealed_decode_tokens: u64,
}

impl Counters {
    /// Requests in the prefill phase (Z_p = E - F_p).
    pub fn z_p(&self) -> u64 {
        self.arrivals_requests - self.completed_prefill_requests
    }

    /// Requests in the decode phase (Z_d = F_p - F_d).
    pub fn z_d(&self) -> u64 {
        self.completed_prefill_requests - self.completed_decode_requests
    }

    /// Unprocessed prefill tokens (W_p = V_p(E) - B_p).
    pub fn w_p(&self) -> u64 {
        self.arrived_prefill_tokens - self.completed_prefill_tokens
    }

    /// Unprocessed decode tokens over all arrived requests (V_d(E) - B_d).
    pub fn w_d(&self) -> u64 {
        self.arrived_decode_tokens - self.completed_decode_tokens
    }

    /// Unprocessed decode tokens of prefill-completed requests
    /// (W_d = V_d(F_p) - B_d).
    pub fn w_d_revealed(&self) -> u64 {
        self.revealed_decode_tokens - self.completed_decode_tokens
    }

    /// The balance identities; all differences must be nonnegative.
    pub fn balanced(&self) -> bool {
        self.arrivals_requests >= self.completed_prefill_requests
            && self.completed_prefill_requests >= self.completed_decode_requests
            && self.arrived_prefill_tokens >= self.completed_prefill_tokens
            && self.arrived_decode_tokens >= self.revealed_decode_tokens
            && self.revealed_decode_tokens >= self.completed_decode_tokens
    }
}

#[derive(Debug)]
struct InFlight {
    token_load: u64,
    prefill_tokens: u64,
    decode_tokens: u64,
    /// (id, decode_total, type_tag, stage): prefill completed in this batch.
    prefill_finishers: Vec<(RequestId, u32, u16, u32)>,
    /// Requests that received a decode token in this batch.
    decode_receivers: Vec<RequestId>,
    /// Requests whose last decode token is in this batch; already removed
    /// from the queue, finalized at commit.
    departed: Vec<Request>,
}

/// Events produced by one slot of one engine.
#[derive(Debug, Default)]
pub struct SlotEvents {
    pub slot: u64,
    /// Token load of a batch started this slot.
    pub batch_started: Option<u64>,
    pub commit: Option<CommitEvents>,
}

/// A batch completed at the end of this slot.
#[derive(Debug, Default)]
pub struct CommitEvents {
    pub prefill_finished: Vec<RequestId>,
    pub decode_tokens: Vec<RequestId>,
    pub departed: Vec<Request>,
}

/// One LLM engine: queue, scheduler memory, in-flight batch, counters.
#[derive(Debug)]
pub struct Engine {
    pub id: u32,
    config: EngineConfig,
    scheduler: SchedulerState,
    queue: RequestQueue,
    slot: u64,
    remaining_batch: u64,
    in_flight: Option<InFlight>,
    counters: Counters,
    /// (z_p, z_d) per (type_tag, stage_index), for workload diagnostics.
    class_counts: BTreeMap<(u16, u32), (u64, u64)>,
    last_batch: Option<(u64, u64)>,
    /// Enforce the full-batch guarantee at runtime (work-conserving policy
    /// with unbounded request caps).
    strict_work_conserving: bool,
}

impl Engine {
    pub fn new(id: u32, config: EngineConfig) -> Self {
        let strict_work_conserving = config.scheduler.is_work_conserving()
            && config.k_prefill.is_unbounded()
            && config.k_decode.is_unbounded();
        Engine {
            id,
            scheduler: config.scheduler.build(),
            queue: RequestQueue::new(),
            slot: 1,
            remaining_batch: 0,
            in_flight: None,
            counters: Counters::default(),
            class_counts: BTreeMap::new(),
            last_batch: None,
            strict_work_conserving,
            config,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn queue(&self) -> &RequestQueue {
        &self.queue
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn current_slot(&self) -> u64 {
        self.slot
    }

    pub fn remaining_batch(&self) -> u64 {
        self.remaining_batch
    }

    /// (z_p, z_d) per (type_tag, stage_index) class.
    pub fn class_counts(&self) -> &BTreeMap<(u16, u32), (u64, u64)> {
        &self.class_counts
    }

    pub fn is_drained(&self) -> bool {
        self.queue.is_empty() && self.in_flight.is_none()
    }

    /// Total unprocessed tokens |X|: queued remaining tokens plus tokens of
    /// the in-flight batch, which stay "unprocessed" until the commit.
    pub fn total_unprocessed_tokens(&self) -> u64 {
        self.queue.total_unprocessed_tokens()
            + self.in_flight.as_ref().map_or(0, |f| f.token_load)
    }

    /// Queue length as seen by load balancers.
    pub fn request_count(&self) -> usize {
        self.queue.len()
    }

    /// Pre-loads a request before the simulation starts (initial backlog).
    pub fn seed_backlog(&mut self, req: Request) {
        debug_assert_eq!(self.slot, 1, "backlog must be seeded before stepping");
        self.note_arrival(&req);
        self.queue.push(req);
    }

    fn note_arrival(&mut self, req: &Request) {
        self.counters.arrivals_requests += 1;
        self.counters.arrived_prefill_tokens += req.prefill_remaining as u64;
        self.counters.arrived_decode_tokens += req.decode_remaining as u64;
        let class = self
            .class_counts
            .entry((req.type_tag, req.stage_index))
            .or_insert((0, 0));
        if req.prefill_remaining == 0 {
            // Injected straight into the decode phase: its prefill counts as
            // already completed so the balance identities stay exact.
            self.counters.completed_prefill_requests += 1;
            self.counters.revealed_decode_tokens += req.decode_remaining as u64;
            class.1 += 1;
        } else {
            class.0 += 1;
        }
    }

    /// Advances the engine by one slot.
    pub fn step(&mut self, arrivals: Vec<Request>) -> Result<SlotEvents, SimError> {
        let slot = self.slot;
        let mut events = SlotEvents {
            slot,
            ..SlotEvents::default()
        };

        // (1) Form a new batch when the engine is free.
        if self.remaining_batch == 0 && self.in_flight.is_none() {
            let plan = self.scheduler.form_batch(&self.queue, &self.config);
            if !plan.is_empty() {
                let full_feasible = self
                    .queue
                    .work_conserving_feasible(TypeFilter::All, self.config.token_budget);
                match validate_batch(&self.queue, &plan, self.config.token_budget) {
                    Ok(BatchValidation::Ok) => {}
                    Ok(BatchValidation::Violations(violations)) => {
                        return Err(SimError::PolicyViolation {
                            engine: self.id,
                            slot,
                            violations,
                        });
                    }
                    Err(source) => {
                        return Err(SimError::PlanStructure {
                            engine: self.id,
                            slot,
                            source,
                        });
                    }
                }
                if self.strict_work_conserving
                    && full_feasible
                    && plan.token_load < self.config.token_budget
                {
                    return Err(SimError::WorkConservationViolation {
                        engine: self.id,
                        slot,
                        token_load: plan.token_load,
                        budget: self.config.token_budget,
                    });
                }

                let context: Vec<EntryContext> = plan
                    .entries
                    .iter()
                    .map(|e| {
                        let req = self.queue.get(e.request_id).expect("validated");
                        let (cum_prefill, cum_decode) = req.processed();
                        EntryContext {
                            delta_p: e.delta_p,
                            delta_d: e.delta_d,
                            cum_prefill,
                            cum_decode,
                        }
                    })
                    .collect();
                let duration = batch_duration_slots(
                    plan.token_load,
                    Some(&context),
                    &self.config.batch_time,
                    &self.config.memory_overhead,
                )
                .expect("nonempty validated batch");

                let mut flight = InFlight {
                    token_load: plan.token_load,
                    prefill_tokens: 0,
                    decode_tokens: 0,
                    prefill_finishers: Vec::new(),
                    decode_receivers: Vec::new(),
                    departed: Vec::new(),
                };
                for e in &plan.entries {
                    let (tag, stage, decode_total) = {
                        let req = self.queue.get(e.request_id).expect("validated");
                        (req.type_tag, req.stage_index, req.decode_total)
                    };
                    let outcome = self
                        .queue
                        .apply_entry(e.request_id, e.delta_p, e.delta_d)
                        .expect("validated");
                    flight.prefill_tokens += e.delta_p as u64;
                    flight.decode_tokens += e.delta_d as u64;
                    if outcome.prefill_finished {
                        flight
                            .prefill_finishers
                            .push((e.request_id, decode_total, tag, stage));
                    }
                    if e.delta_d == 1 {
                        flight.decode_receivers.push(e.request_id);
                    }
                    if let Some(req) = outcome.departed {
                        flight.departed.push(req);
                    }
                }
                self.remaining_batch = duration;
                self.last_batch = Some((slot, plan.token_load));
                events.batch_started = Some(plan.token_load);
                self.in_flight = Some(flight);
            }
        }

        // (2) Burn one slot of the in-flight batch.
        if self.remaining_batch > 0 {
            self.remaining_batch -= 1;
            // (3) Commit at the end of the slot in which R reaches zero.
            if self.remaining_batch == 0 {
                let flight = self.in_flight.take().expect("R > 0 implies in-flight");
                self.counters.completed_prefill_tokens += flight.prefill_tokens;
                self.counters.completed_decode_tokens += flight.decode_tokens;
                let mut commit = CommitEvents {
                    prefill_finished: Vec::with_capacity(flight.prefill_finishers.len()),
                    decode_tokens: flight.decode_receivers,
                    departed: Vec::new(),
                };
                for (id, decode_total, tag, stage) in flight.prefill_finishers {
                    self.counters.completed_prefill_requests += 1;
                    self.counters.revealed_decode_tokens += decode_total as u64;
                    let class = self.class_counts.entry((tag, stage)).or_insert((0, 0));
                    class.0 -= 1;
                    class.1 += 1;
                    commit.prefill_finished.push(id);
                }
                for req in flight.departed {
                    self.counters.completed_decode_requests += 1;
                    let class = self
                        .class_counts
                        .entry((req.type_tag, req.stage_index))
                        .or_insert((0, 0));
                    class.1 -= 1;
                    commit.departed.push(req);
                }
                events.commit = Some(commit);
            }
        }

        // (4) Arrivals join the queue after this slot's processing.
        for req in arrivals {
            debug_assert_eq!(req.arrival_slot, slot, "arrival slot mismatch");
            self.note_arrival(&req);
            self.queue.push(req);
        }

        // (5) Advance the clock.
        self.slot += 1;

        #[cfg(debug_assertions)]
        self.assert_consistent();

        Ok(events)
    }

    /// End-of-slot sample of the trace quantities.
    pub fn trace_sample(&self, slot: u64) -> TraceSample {
        let batch_token_load = match self.last_batch {
            Some((started, load)) if started == slot => load,
            _ => 0,
        };
        TraceSample {
            slot,
            engine: self.id,
            z_p: self.counters.z_p(),
            z_d: self.counters.z_d(),
            w_p: self.counters.w_p(),
            w_d: self.counters.w_d(),
            batch_token_load,
            f_d_cum: self.counters.completed_decode_requests,
        }
    }

    #[cfg(debug_assertions)]
    fn assert_consistent(&self) {
        assert!(self.counters.balanced(), "balance identities broken");
        assert_eq!(
            self.remaining_batch > 0,
            self.in_flight.is_some(),
            "R > 0 must coincide with an in-flight batch"
        );
        let (inflight_p, inflight_d, finishers, departers) = self
            .in_flight
            .as_ref()
            .map_or((0, 0, 0, 0), |f| {
                (
                    f.prefill_tokens,
                    f.decode_tokens,
                    f.prefill_finishers.len() as u64,
                    f.departed.len() as u64,
                )
            });
        assert_eq!(
            self.counters.w_p(),
            self.queue.prefill_tokens(TypeFilter::All) + inflight_p,
            "prefill token balance"
        );
        assert_eq!(
            self.counters.w_d(),
            self.queue.total_unprocessed_tokens() - self.queue.prefill_tokens(TypeFilter::All)
                + inflight_d,
            "decode token balance"
        );
        assert_eq!(
            self.counters.z_p(),
            self.queue.prefill_count(TypeFilter::All) as u64 + finishers,
            "prefill request balance"
        );
        assert_eq!(
            self.counters.z_d() + finishers,
            self.queue.decode_count(TypeFilter::All) as u64 + departers,
            "decode request balance"
        );
        let class_zp: u64 = self.class_counts.values().map(|c| c.0).sum();
        let class_zd: u64 = self.class_counts.values().map(|c| c.1).sum();
        assert_eq!(class_zp, self.counters.z_p());
        assert_eq!(class_zd, self.counters.z_d());
    }
}
