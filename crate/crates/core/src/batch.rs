//! Batch plans, batch-processing-time models, and the feasibility validator.
//!
//! An iteration processes a batch of tokens drawn from multiple requests.
//! Its duration depends (piecewise linearly) on the total token load, not on
//! the batch constituents; optional extensions add attention time for long
//! contexts and a KV-cache overflow overhead.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::queue::RequestQueue;
use crate::request::RequestId;

/// Token allocation for one request within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry {
    pub request_id: RequestId,
    /// Prefill tokens taken from this request (a chunk of its prompt).
    pub delta_p: u32,
    /// Decode tokens taken from this request; at most 1 per iteration.
    pub delta_d: u32,
}

impl PlanEntry {
    pub fn tokens(&self) -> u64 {
        self.delta_p as u64 + self.delta_d as u64
    }
}

/// One iteration's batch: per-request token allocations plus the total load.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BatchPlan {
    pub entries: Vec<PlanEntry>,
    /// Total tokens in the batch; always the sum over entries.
    pub token_load: u64,
}

impl BatchPlan {
    pub fn from_entries(entries: Vec<PlanEntry>) -> Self {
        let token_load = entries.iter().map(PlanEntry::tokens).sum();
        BatchPlan {
            entries,
            token_load,
        }
    }

    pub fn empty() -> Self {
        BatchPlan::default()
    }

    pub fn is_empty(&self) -> bool {
        self.token_load == 0
    }
}

/// Maps an iteration's token load to a processing duration in slots.
///
/// `piecewise_linear` is the measured model `t = c + a * max(0, load - b0)`
/// in milliseconds, rounded up to whole slots of `slot_ms` each (durations
/// are never understated; minimum one slot). `constant_slots` pins every
/// iteration to a fixed duration regardless of load. `long_context` adds a
/// quadratic attention term evaluated from per-entry context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum BatchTimeModel {
    ConstantSlots {
        t: u64,
    },
    PiecewiseLinear {
        c: f64,
        a: f64,
        b0: u64,
        slot_ms: f64,
    },
    LongContext {
        c: f64,
        a: f64,
        b0: u64,
        slot_ms: f64,
        alpha: f64,
        beta: f64,
    },
}

impl BatchTimeModel {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            BatchTimeModel::ConstantSlots { t } => {
                if t < 1 {
                    return Err("constant_slots.t must be >= 1".into());
                }
            }
            BatchTimeModel::PiecewiseLinear { c, a, slot_ms, .. } => {
                if c < 0.0 || a < 0.0 {
                    return Err("batch_time parameters must be nonnegative".into());
                }
                if slot_ms <= 0.0 {
                    return Err("slot_ms must be > 0".into());
                }
            }
            BatchTimeModel::LongContext {
                c,
                a,
                slot_ms,
                alpha,
                beta,
                ..
            } => {
                if c < 0.0 || a < 0.0 || alpha < 0.0 || beta < 0.0 {
                    return Err("batch_time parameters must be nonnegative".into());
                }
                if slot_ms <= 0.0 {
                    return Err("slot_ms must be > 0".into());
                }
            }
        }
        Ok(())
    }

    fn needs_context(&self) -> bool {
        matches!(self, BatchTimeModel::LongContext { .. })
    }
}

/// Overhead applied when a request's KV footprint exceeds cache capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OverheadMode {
    None,
    Swapping { a1: f64, a2: f64 },
    Recomputation { b1: f64, b2: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryOverheadModel {
    #[serde(flatten)]
    pub mode: OverheadMode,
    /// KV tokens per request above which the overhead applies.
    #[serde(default)]
    pub kv_capacity: u64,
}

impl Default for MemoryOverheadModel {
    fn default() -> Self {
        MemoryOverheadModel {
            mode: OverheadMode::None,
            kv_capacity: 0,
        }
    }
}

impl MemoryOverheadModel {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_none(&self) -> bool {
        matches!(self.mode, OverheadMode::None)
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.mode {
            OverheadMode::None => Ok(()),
            OverheadMode::Swapping { a1, a2 } if a1 >= 0.0 && a2 >= 0.0 => Ok(()),
            OverheadMode::Recomputation { b1, b2 } if b1 >= 0.0 && b2 >= 0.0 => Ok(()),
            _ => Err("memory_overhead coefficients must be nonnegative".into()),
        }
    }

    /// Per-entry overhead in milliseconds given the request's KV footprint
    /// after this batch. Zero when at or under capacity.
    fn entry_ms(&self, kv_tokens: u64) -> f64 {
        let x = kv_tokens.saturating_sub(self.kv_capacity) as f64;
        if x <= 0.0 {
            return 0.0;
        }
        match self.mode {
            OverheadMode::None => 0.0,
            OverheadMode::Swapping { a1, a2 } => a1 * x + a2,
            OverheadMode::Recomputation { b1, b2 } => b1 * x * x + b2,
        }
    }
}

/// Per-entry context for the long-context attention term and the memory
/// overhead: the batch allocation plus cumulative tokens processed for the
/// request before this batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryContext {
    pub delta_p: u32,
    pub delta_d: u32,
    /// Prefill tokens of this request already processed before the batch.
    pub cum_prefill: u64,
    /// Decode tokens of this request already processed before the batch.
    pub cum_decode: u64,
}

/// Number of slots needed to process a batch with the given token load.
///
/// `plan_context` must be supplied for the `long_context` variant and
/// whenever a memory overhead mode is active; other variants ignore it.
/// A zero token load is an error: idle slots are the engine's business.
pub fn batch_duration_slots(
    token_load: u64,
    plan_context: Option<&[EntryContext]>,
    model: &BatchTimeModel,
    overhead: &MemoryOverheadModel,
) -> Result<u64, CoreError> {
    if token_load == 0 {
        return Err(CoreError::EmptyBatch);
    }
    if (model.needs_context() || !overhead.is_none()) && plan_context.is_none() {
        return Err(CoreError::MissingPlanContext);
    }

    let overhead_ms = |ctx: &[EntryContext]| -> f64 {
        if overhead.is_none() {
            return 0.0;
        }
        ctx.iter()
            .map(|e| {
                let kv = e.cum_prefill + e.cum_decode + e.delta_p as u64 + e.delta_d as u64;
                overhead.entry_ms(kv)
            })
            .sum()
    };

    let mlp_ms = |c: f64, a: f64, b0: u64| c + a * token_load.saturating_sub(b0) as f64;

    let slots = match *model {
        BatchTimeModel::ConstantSlots { t } => t,
        BatchTimeModel::PiecewiseLinear { c, a, b0, slot_ms } => {
            let mut t_ms = mlp_ms(c, a, b0);
            if let Some(ctx) = plan_context {
                t_ms += overhead_ms(ctx);
            }
            round_up_slots(t_ms, slot_ms)
        }
        BatchTimeModel::LongContext {
            c,
            a,
            b0,
            slot_ms,
            alpha,
            beta,
        } => {
            let ctx = plan_context.expect("checked above");
            let t_attn: f64 = ctx
                .iter()
                .map(|e| {
                    let dp = e.delta_p as f64;
                    alpha * dp * dp
                        + beta * (e.cum_decode + e.cum_prefill) as f64 * e.delta_d as f64
                })
                .sum();
            let t_ms = t_attn + mlp_ms(c, a, b0) + overhead_ms(ctx);
            round_up_slots(t_ms, slot_ms)
        }
    };
    Ok(slots.max(1))
}

fn round_up_slots(t_ms: f64, slot_ms: f64) -> u64 {
    (t_ms / slot_ms).ceil() as u64
}

/// Which feasibility rule a plan entry broke.
///
/// * `a` — decode token loaded while prefill is unfinished.
/// * `b` — prefill allocation exceeds unprocessed prefill tokens.
/// * `c` — more than one decode token from a request in one batch.
/// * `d` — token load exceeds the token budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationRule {
    A,
    B,
    C,
    D,
}

impl std::fmt::Display for ViolationRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let letter = match self {
            ViolationRule::A => "a",
            ViolationRule::B => "b",
            ViolationRule::C => "c",
            ViolationRule::D => "d",
        };
        f.write_str(letter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub rule: ViolationRule,
    /// Offending request; `None` for the plan-wide budget rule.
    pub request_id: Option<RequestId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchValidation {
    Ok,
    Violations(Vec<Violation>),
}

impl BatchValidation {
    pub fn is_ok(&self) -> bool {
        matches!(self, BatchValidation::Ok)
    }
}

/// Checks a plan against the feasibility constraints for the given queue:
/// (a) no decode before prefill completes, (b) prefill allocations within
/// unprocessed tokens, (c) at most one decode token per request, (d) token
/// load within budget. Unknown or duplicated request ids are structural
/// errors, distinct from rule violations.
pub fn validate_batch(
    queue: &RequestQueue,
    plan: &BatchPlan,
    token_budget: u64,
) -> Result<BatchValidation, CoreError> {
    let actual: u64 = plan.entries.iter().map(PlanEntry::tokens).sum();
    if actual != plan.token_load {
        return Err(CoreError::TokenLoadMismatch {
            stated: plan.token_load,
            actual,
        });
    }

    let mut seen = std::collections::HashSet::with_capacity(plan.entries.len());
    let mut violations = Vec::new();
    for entry in &plan.entries {
        let req = queue
            .get(entry.request_id)
            .ok_or(CoreError::UnknownRequest(entry.request_id))?;
        if !seen.insert(entry.request_id) {
            return Err(CoreError::DuplicateEntry(entry.request_id));
        }
        if req.prefill_remaining > 0 && entry.delta_d > 0 {
            violations.push(Violation {
                rule: ViolationRule::A,
                request_id: Some(entry.request_id),
            });
        }
        if entry.delta_p > req.prefill_remaining {
            violations.push(Violation {
                rule: ViolationRule::B,
                request_id: Some(entry.request_id),
            });
        }
        if entry.delta_d > 1 {
            violations.push(Violation {
                rule: ViolationRule::C,
                request_id: Some(entry.request_id),
            });
        }
    }
    if plan.token_load > token_budget {
        violations.push(Violation {
            rule: ViolationRule::D,
            request_id: None,
        });
    }

    if violations.is_empty() {
        Ok(BatchValidation::Ok)
    } else {
        Ok(BatchValidation::Violations(violations))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::request::Request;

    fn no_overhead() -> MemoryOverheadModel {
        MemoryOverheadModel::none()
    }

    fn measured_model() -> BatchTimeModel {
        // c = 45.5 ms, a = 0.30 ms/token, kink at 64 tokens, 1 ms slots.
        BatchTimeModel::PiecewiseLinear {
            c: 45.5,
            a: 0.30,
            b0: 64,
            slot_ms: 1.0,
        }
    }

    #[test]
    fn duration_at_kink_is_base_cost() {
        let slots = batch_duration_slots(64, None, &measured_model(), &no_overhead()).unwrap();
        assert_eq!(slots, 46);
    }

    #[test]
    fn duration_above_kink_adds_linear_term() {
        // 45.5 + 0.30 * 512 = 199.1 ms -> 200 slots.
        let slots = batch_duration_slots(576, None, &measured_model(), &no_overhead()).unwrap();
        assert_eq!(slots, 200);
    }

    #[test]
    fn constant_model_ignores_load() {
        let model = BatchTimeModel::ConstantSlots { t: 1 };
        let slots = batch_duration_slots(768, None, &model, &no_overhead()).unwrap();
        assert_eq!(slots, 1);
    }

    #[test]
    fn below_kink_rounds_base_cost_to_slots() {
        let model = BatchTimeModel::PiecewiseLinear {
            c: 10.0,
            a: 1.0,
            b0: 5,
            slot_ms: 4.0,
        };
        let slots = batch_duration_slots(1, None, &model, &no_overhead()).unwrap();
        assert_eq!(slots, 3);
    }

    #[test]
    fn zero_load_is_rejected() {
        let err = batch_duration_slots(0, None, &measured_model(), &no_overhead()).unwrap_err();
        assert_eq!(err, CoreError::EmptyBatch);
    }

    #[test]
    fn duration_nondecreasing_and_flat_below_kink() {
        let model = measured_model();
        let mut prev = 1;
        for load in 1..=600 {
            let slots = batch_duration_slots(load, None, &model, &no_overhead()).unwrap();
            assert!(slots >= prev, "duration decreased at load {load}");
            assert!(slots >= 1);
            if load <= 64 {
                assert_eq!(slots, 46);
            }
            prev = slots;
        }
    }

    #[test]
    fn long_context_with_zero_attention_matches_piecewise() {
        let plain = measured_model();
        let long = BatchTimeModel::LongContext {
            c: 45.5,
            a: 0.30,
            b0: 64,
            slot_ms: 1.0,
            alpha: 0.0,
            beta: 0.0,
        };
        let ctx = vec![
            EntryContext {
                delta_p: 100,
                delta_d: 0,
                cum_prefill: 0,
                cum_decode: 0,
            },
            EntryContext {
                delta_p: 0,
                delta_d: 1,
                cum_prefill: 300,
                cum_decode: 12,
            },
        ];
        for load in [1u64, 64, 101, 576] {
            let a = batch_duration_slots(load, Some(&ctx), &plain, &no_overhead()).unwrap();
            let b = batch_duration_slots(load, Some(&ctx), &long, &no_overhead()).unwrap();
            assert_eq!(a, b, "mismatch at load {load}");
        }
    }

    #[test]
    fn long_context_attention_term() {
        let model = BatchTimeModel::LongContext {
            c: 0.0,
            a: 0.0,
            b0: 0,
            slot_ms: 1.0,
            alpha: 0.01,
            beta: 0.5,
        };
        // alpha * 20^2 + beta * (150 + 10) * 1 = 4 + 80 = 84 ms.
        let ctx = vec![
            EntryContext {
                delta_p: 20,
                delta_d: 0,
                cum_prefill: 0,
                cum_decode: 0,
            },
            EntryContext {
                delta_p: 0,
                delta_d: 1,
                cum_prefill: 150,
                cum_decode: 10,
            },
        ];
        let slots = batch_duration_slots(21, Some(&ctx), &model, &no_overhead()).unwrap();
        assert_eq!(slots, 84);
    }

    #[test]
    fn long_context_requires_context() {
        let model = BatchTimeModel::LongContext {
            c: 1.0,
            a: 0.0,
            b0: 0,
            slot_ms: 1.0,
            alpha: 0.0,
            beta: 0.0,
        };
        let err = batch_duration_slots(5, None, &model, &no_overhead()).unwrap_err();
        assert_eq!(err, CoreError::MissingPlanContext);
    }

    #[test]
    fn swapping_overhead_applies_above_capacity_only() {
        let overhead = MemoryOverheadModel {
            mode: OverheadMode::Swapping { a1: 2.0, a2: 10.0 },
            kv_capacity: 100,
        };
        let model = BatchTimeModel::PiecewiseLinear {
            c: 5.0,
            a: 0.0,
            b0: 0,
            slot_ms: 1.0,
        };
        // Entry ends at 90 KV tokens: under capacity, no overhead.
        let under = vec![EntryContext {
            delta_p: 40,
            delta_d: 0,
            cum_prefill: 50,
            cum_decode: 0,
        }];
        assert_eq!(
            batch_duration_slots(40, Some(&under), &model, &overhead).unwrap(),
            5
        );
        // Entry ends at 110 KV tokens: x = 10, o = 2*10 + 10 = 30 ms.
        let over = vec![EntryContext {
            delta_p: 40,
            delta_d: 0,
            cum_prefill: 70,
            cum_decode: 0,
        }];
        assert_eq!(
            batch_duration_slots(40, Some(&over), &model, &overhead).unwrap(),
            35
        );
    }

    #[test]
    fn recomputation_overhead_is_quadratic() {
        let overhead = MemoryOverheadModel {
            mode: OverheadMode::Recomputation { b1: 0.5, b2: 1.0 },
            kv_capacity: 10,
        };
        let model = BatchTimeModel::PiecewiseLinear {
            c: 0.0,
            a: 0.0,
            b0: 0,
            slot_ms: 1.0,
        };
        // KV after = 14, x = 4: o = 0.5*16 + 1 = 9 ms.
        let ctx = vec![EntryContext {
            delta_p: 0,
            delta_d: 1,
            cum_prefill: 8,
            cum_decode: 5,
        }];
        assert_eq!(
            batch_duration_slots(1, Some(&ctx), &model, &overhead).unwrap(),
            9
        );
    }

    fn queue_of(requests: Vec<Request>) -> RequestQueue {
        RequestQueue::from_requests(requests, 4)
    }

    fn entry(id: RequestId, dp: u32, dd: u32) -> PlanEntry {
        PlanEntry {
            request_id: id,
            delta_p: dp,
            delta_d: dd,
        }
    }

    #[test]
    fn decode_before_prefill_done_breaks_rule_a() {
        let mut r = Request::new(1, 0, 0, 10, 5);
        r.prefill_remaining = 3;
        let q = queue_of(vec![r]);
        let plan = BatchPlan::from_entries(vec![entry(1, 0, 1)]);
        let out = validate_batch(&q, &plan, 256).unwrap();
        assert_eq!(
            out,
            BatchValidation::Violations(vec![Violation {
                rule: ViolationRule::A,
                request_id: Some(1)
            }])
        );
    }

    #[test]
    fn oversized_prefill_chunk_breaks_rule_b() {
        let mut r = Request::new(1, 0, 0, 10, 5);
        r.prefill_remaining = 3;
        let q = queue_of(vec![r]);
        let plan = BatchPlan::from_entries(vec![entry(1, 5, 0)]);
        let out = validate_batch(&q, &plan, 256).unwrap();
        assert_eq!(
            out,
            BatchValidation::Violations(vec![Violation {
                rule: ViolationRule::B,
                request_id: Some(1)
            }])
        );
    }

    #[test]
    fn two_decode_tokens_break_rule_c() {
        let mut r = Request::new(1, 0, 0, 10, 5);
        r.prefill_remaining = 0;
        let q = queue_of(vec![r]);
        let plan = BatchPlan::from_entries(vec![entry(1, 0, 2)]);
        let out = validate_batch(&q, &plan, 256).unwrap();
        assert_eq!(
            out,
            BatchValidation::Violations(vec![Violation {
                rule: ViolationRule::C,
                request_id: Some(1)
            }])
        );
    }

    #[test]
    fn budget_excess_breaks_rule_d() {
        let r = Request::new(1, 0, 0, 1000, 5);
        let q = queue_of(vec![r]);
        let plan = BatchPlan::from_entries(vec![entry(1, 257, 0)]);
        let out = validate_batch(&q, &plan, 256).unwrap();
        assert_eq!(
            out,
            BatchValidation::Violations(vec![Violation {
                rule: ViolationRule::D,
                request_id: None
            }])
        );
    }

    #[test]
    fn feasible_mixed_plan_passes_all_rules() {
        let mut decode = Request::new(1, 0, 0, 4, 2);
        decode.prefill_remaining = 0;
        let prefill = Request::new(2, 0, 0, 10, 4);
        let q = queue_of(vec![decode, prefill]);
        let plan = BatchPlan::from_entries(vec![entry(1, 0, 1), entry(2, 9, 0)]);
        assert_eq!(plan.token_load, 10);
        let out = validate_batch(&q, &plan, 10).unwrap();
        assert!(out.is_ok());
    }

    #[test]
    fn unknown_request_is_structural_error() {
        let q = queue_of(vec![Request::new(1, 0, 0, 4, 2)]);
        let plan = BatchPlan::from_entries(vec![entry(9, 1, 0)]);
        let err = validate_batch(&q, &plan, 10).unwrap_err();
        assert_eq!(err, CoreError::UnknownRequest(9));
    }

    #[test]
    fn duplicate_entry_is_structural_error() {
        let q = queue_of(vec![Request::new(1, 0, 0, 4, 2)]);
        let plan = BatchPlan::from_entries(vec![entry(1, 1, 0), entry(1, 1, 0)]);
        let err = validate_batch(&q, &plan, 10).unwrap_err();
        assert_eq!(err, CoreError::DuplicateEntry(1));
    }
}
