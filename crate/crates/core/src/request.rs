//! The inference request as tracked by the simulator.

use serde::{Deserialize, Serialize};

/// Unique request identifier, assigned in arrival order.
pub type RequestId = u64;

/// Processing phase of a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decode,
}

/// One inference request (or one sub-task of a multi-step workflow).
///
/// `prefill_remaining` / `decode_remaining` count unprocessed tokens and
/// exclude tokens currently loaded in an in-flight batch. A request departs
/// its queue exactly when `decode_remaining` reaches zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: RequestId,
    /// Index into the workload type table.
    pub type_tag: u16,
    /// Slot at which this request (or sub-task) joined its current queue.
    pub arrival_slot: u64,
    pub prefill_total: u32,
    pub decode_total: u32,
    pub prefill_remaining: u32,
    pub decode_remaining: u32,
    /// Which step of a multi-step workflow this sub-task is on; 0 for
    /// single-engine workloads.
    pub stage_index: u32,
}

impl Request {
    /// A fresh request with full prefill and decode work remaining.
    pub fn new(
        id: RequestId,
        type_tag: u16,
        arrival_slot: u64,
        prefill_total: u32,
        decode_total: u32,
    ) -> Self {
        debug_assert!(prefill_total >= 1 && decode_total >= 1);
        Request {
            id,
            type_tag,
            arrival_slot,
            prefill_total,
            decode_total,
            prefill_remaining: prefill_total,
            decode_remaining: decode_total,
            stage_index: 0,
        }
    }

    pub fn with_stage(mut self, stage_index: u32) -> Self {
        self.stage_index = stage_index;
        self
    }

    pub fn phase(&self) -> Phase {
        if self.prefill_remaining > 0 {
            Phase::Prefill
        } else {
            Phase::Decode
        }
    }

    /// Unprocessed tokens across both phases.
    pub fn unprocessed_tokens(&self) -> u64 {
        self.prefill_remaining as u64 + self.decode_remaining as u64
    }

    /// Tokens already processed (the request's KV footprint), split out as
    /// (prefill, decode) for batch-time context.
    pub fn processed(&self) -> (u64, u64) {
        (
            (self.prefill_total - self.prefill_remaining) as u64,
            (self.decode_total - self.decode_remaining) as u64,
        )
    }

    /// Invariant checks from the model: remaining counts within totals and
    /// no decode progress before prefill completes.
    pub fn check_invariants(&self) -> bool {
        self.prefill_remaining <= self.prefill_total
            && self.decode_remaining <= self.decode_total
            && (self.prefill_remaining == 0 || self.decode_remaining == self.decode_total)
    }
}
