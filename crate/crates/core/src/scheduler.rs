//! Batch-forming policies.
//!
//! All schedulers share one contract: given the FCFS queue and the engine
//! config, produce a feasible batch plan (possibly empty, which makes the
//! engine idle for a slot). The work-conserving family fills the batch to
//! the full token budget whenever the queue makes that feasible; the
//! non-mixed incumbent policies deliberately do not, which is exactly what
//! makes them interesting to simulate.
//!
//! Policy summary:
//!
//! * `kfcfs_work_conserving` — one decode token from each of the oldest
//!   decode-phase requests (up to `k_decode`), then prefill chunks from the
//!   oldest prefill-phase requests (up to `k_prefill`) to fill the budget;
//!   `prefill_first` swaps the passes.
//! * `sarathi` — decode-first chunked prefill; identical to
//!   `kfcfs_work_conserving(decode_first)` with the config's request caps.
//! * `orca` — prefill first in FCFS order (chunking the last admitted
//!   prompt to fit); decode tokens join only in the batch where the queue's
//!   last prefill tokens are admitted.
//! * `vllm_vanilla` — non-mixed: prefill-only batches of whole prompts
//!   while any prefill work exists (an oversized head-of-line prompt is
//!   chunked to exactly the budget), decode-only batches otherwise.
//! * `faster_transformer` — request-level cohorts: admit up to
//!   `request_batch_cap` oldest requests, run their prefills, then repeat
//!   decode-only batches until every member departs; no mid-cohort refill.
//! * `type_priority` — apply an inner policy to the priority type first,
//!   then fill leftover budget from the remaining types.

use serde::{Deserialize, Serialize};

use crate::batch::{BatchPlan, PlanEntry};
use crate::engine::EngineConfig;
use crate::error::ConfigError;
use crate::queue::{RequestQueue, TypeFilter};
use crate::request::{Phase, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhasePriority {
    DecodeFirst,
    PrefillFirst,
}

/// Declarative scheduler choice; part of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchedulerSpec {
    KfcfsWorkConserving {
        phase_priority: PhasePriority,
    },
    Sarathi,
    Orca,
    VllmVanilla,
    FasterTransformer,
    TypePriority {
        priority_type: u16,
        inner: Box<SchedulerSpec>,
    },
}

impl SchedulerSpec {
    pub fn validate(&self, n_types: usize) -> Result<(), ConfigError> {
        self.validate_depth(n_types, 0)
    }

    fn validate_depth(&self, n_types: usize, depth: usize) -> Result<(), ConfigError> {
        if let SchedulerSpec::TypePriority {
            priority_type,
            inner,
        } = self
        {
            if depth >= 2 {
                return Err(ConfigError::new(
                    "type_priority may not be nested more than once",
                ));
            }
            if *priority_type as usize >= n_types {
                return Err(ConfigError::new(format!(
                    "type_priority references type {priority_type} but only {n_types} types exist"
                )));
            }
            if matches!(**inner, SchedulerSpec::FasterTransformer) {
                return Err(ConfigError::new(
                    "faster_transformer cannot be the inner policy of type_priority \
                     (cohort state cannot be split across priority classes)",
                ));
            }
            inner.validate_depth(n_types, depth + 1)?;
        }
        Ok(())
    }

    /// Whether the policy guarantees a full batch whenever feasible.
    pub fn is_work_conserving(&self) -> bool {
        match self {
            SchedulerSpec::KfcfsWorkConserving { .. }
            | SchedulerSpec::Sarathi
            | SchedulerSpec::Orca => true,
            SchedulerSpec::VllmVanilla | SchedulerSpec::FasterTransformer => false,
            SchedulerSpec::TypePriority { inner, .. } => inner.is_work_conserving(),
        }
    }

    pub fn build(&self) -> SchedulerState {
        match self {
            SchedulerSpec::KfcfsWorkConserving { phase_priority } => {
                SchedulerState::Kfcfs(*phase_priority)
            }
            SchedulerSpec::Sarathi => SchedulerState::Kfcfs(PhasePriority::DecodeFirst),
            SchedulerSpec::Orca => SchedulerState::Orca,
            SchedulerSpec::VllmVanilla => SchedulerState::VllmVanilla,
            SchedulerSpec::FasterTransformer => SchedulerState::FasterTransformer {
                cohort: Vec::new(),
            },
            SchedulerSpec::TypePriority {
                priority_type,
                inner,
            } => SchedulerState::TypePriority {
                priority_type: *priority_type,
                inner: Box::new(inner.build()),
            },
        }
    }
}

/// True iff the queue can fill a whole budget: unprocessed prefill tokens
/// plus one decode token per decode-phase request reach `token_budget`.
pub fn is_work_conserving_feasible(queue: &RequestQueue, config: &EngineConfig) -> bool {
    queue.work_conserving_feasible(TypeFilter::All, config.token_budget)
}

/// Runtime scheduler, holding any per-engine policy memory (cohorts).
#[derive(Debug, Clone)]
pub enum SchedulerState {
    Kfcfs(PhasePriority),
    Orca,
    VllmVanilla,
    FasterTransformer {
        cohort: Vec<RequestId>,
    },
    TypePriority {
        priority_type: u16,
        inner: Box<SchedulerState>,
    },
}

impl SchedulerState {
    /// Forms the next batch from the queue. Deterministic in (queue order,
    /// config, cohort state); may return an empty plan.
    pub fn form_batch(&mut self, queue: &RequestQueue, config: &EngineConfig) -> BatchPlan {
        let mut entries = Vec::new();
        self.fill(queue, TypeFilter::All, config.token_budget, config, &mut entries);
        BatchPlan::from_entries(entries)
    }

    /// Appends entries for the filtered view, spending at most `budget`
    /// tokens. Returns the tokens actually planned.
    fn fill(
        &mut self,
        queue: &RequestQueue,
        filter: TypeFilter,
        budget: u64,
        config: &EngineConfig,
        entries: &mut Vec<PlanEntry>,
    ) -> u64 {
        if budget == 0 || matches!(filter, TypeFilter::Empty) {
            return 0;
        }
        match self {
            SchedulerState::Kfcfs(PhasePriority::DecodeFirst) => {
                let mut left = budget;
                left -= decode_pass(queue, filter, left, config.k_decode.cap(), entries);
                left -= prefill_chunk_pass(queue, filter, left, config.k_prefill.cap(), entries);
                budget - left
            }
            SchedulerState::Kfcfs(PhasePriority::PrefillFirst) => {
                let mut left = budget;
                left -= prefill_chunk_pass(queue, filter, left, config.k_prefill.cap(), entries);
                left -= decode_pass(queue, filter, left, config.k_decode.cap(), entries);
                budget - left
            }
            SchedulerState::Orca => {
                let mut left = budget;
                let prefill_available = queue.prefill_tokens(filter);
                let spent = prefill_chunk_pass(queue, filter, left, config.k_prefill.cap(), entries);
                left -= spent;
                // Decode joins only once no unprocessed prefill remains.
                if spent == prefill_available && left > 0 {
                    left -= decode_pass(queue, filter, left, config.k_decode.cap(), entries);
                }
                budget - left
            }
            SchedulerState::VllmVanilla => {
                if queue.prefill_count(filter) > 0 {
                    budget - whole_prefill_pass(queue, filter, budget, entries)
                } else {
                    decode_pass(queue, filter, budget, config.k_decode.cap(), entries)
                }
            }
            SchedulerState::FasterTransformer { cohort } => {
                // Drop departed members; finished requests are not replaced
                // until the whole cohort drains.
                cohort.retain(|id| {
                    queue
                        .get(*id)
                        .is_some_and(|r| filter.matches(r.type_tag))
                });
                if cohort.is_empty() {
                    *cohort = queue
                        .all_iter(filter)
                        .take(config.request_batch_cap.cap())
                        .map(|r| r.id)
                        .collect();
                }
                let in_prefill = cohort
                    .iter()
                    .any(|id| queue.get(*id).is_some_and(|r| r.prefill_remaining > 0));
                let mut left = budget;
                if in_prefill {
                    for id in cohort.iter() {
                        if left == 0 {
                            break;
                        }
                        let req = &queue.get(*id).expect("pruned above");
                        if req.prefill_remaining == 0 {
                            continue;
                        }
                        let chunk = (req.prefill_remaining as u64).min(left);
                        entries.push(PlanEntry {
                            request_id: *id,
                            delta_p: chunk as u32,
                            delta_d: 0,
                        });
                        left -= chunk;
                    }
                } else {
                    for id in cohort.iter() {
                        if left == 0 {
                            break;
                        }
                        entries.push(PlanEntry {
                            request_id: *id,
                            delta_p: 0,
                            delta_d: 1,
                        });
                        left -= 1;
                    }
                }
                budget - left
            }
            SchedulerState::TypePriority {
                priority_type,
                inner,
            } => {
                let t = *priority_type;
                let spent = inner.fill(queue, filter.and_only(t), budget, config, entries);
                // Lower-priority tokens are mixed in only when the priority
                // type cannot fill the batch.
                let leftover = budget - spent;
                spent + inner.fill(queue, filter.and_except(t), leftover, config, entries)
            }
        }
    }
}

/// One decode token from each of the up-to-`k` oldest decode-phase
/// requests, bounded by the remaining budget. Returns tokens spent.
fn decode_pass(
    queue: &RequestQueue,
    filter: TypeFilter,
    budget: u64,
    k: usize,
    entries: &mut Vec<PlanEntry>,
) -> u64 {
    let mut spent = 0;
    for req in queue.phase_iter(Phase::Decode, filter).take(k) {
        if spent == budget {
            break;
        }
        entries.push(PlanEntry {
            request_id: req.id,
            delta_p: 0,
            delta_d: 1,
        });
        spent += 1;
    }
    spent
}

/// Prefill chunks from the up-to-`k` oldest prefill-phase requests, each
/// request exhausted before the next is touched, the last chunked to fit.
fn prefill_chunk_pass(
    queue: &RequestQueue,
    filter: TypeFilter,
    budget: u64,
    k: usize,
    entries: &mut Vec<PlanEntry>,
) -> u64 {
    let mut spent = 0;
    for req in queue.phase_iter(Phase::Prefill, filter).take(k) {
        if spent == budget {
            break;
        }
        let chunk = (req.prefill_remaining as u64).min(budget - spent);
        entries.push(PlanEntry {
            request_id: req.id,
            delta_p: chunk as u32,
            delta_d: 0,
        });
        spent += chunk;
    }
    spent
}

/// Whole remaining prompts in FCFS order while they fit. If the very first
/// candidate alone exceeds the budget it is chunked to exactly the budget;
/// otherwise admission stops at the first prompt that does not fit.
fn whole_prefill_pass(
    queue: &RequestQueue,
    filter: TypeFilter,
    budget: u64,
    entries: &mut Vec<PlanEntry>,
) -> u64 {
    let mut spent = 0;
    for req in queue.phase_iter(Phase::Prefill, filter) {
        let whole = req.prefill_remaining as u64;
        if whole <= budget - spent {
            entries.push(PlanEntry {
                request_id: req.id,
                delta_p: whole as u32,
                delta_d: 0,
            });
            spent += whole;
        } else {
            if spent == 0 {
                entries.push(PlanEntry {
                    request_id: req.id,
                    delta_p: budget as u32,
                    delta_d: 0,
                });
                spent = budget;
            }
            break;
        }
    }
    spent
}
