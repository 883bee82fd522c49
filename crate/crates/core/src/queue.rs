//! The per-engine request queue.
//!
//! Requests are kept in FCFS order (arrival slot, ties by id) with separate
//! order indices per phase and per workload type, so schedulers can walk
//! exactly the requests they may draw tokens from without scanning the whole
//! queue. Running token totals make work-conserving feasibility an O(1)
//! check.

use std::collections::{BTreeSet, HashMap};

use crate::error::CoreError;
use crate::request::{Phase, Request, RequestId};

/// FCFS ordering key: arrival slot first, ties broken by request id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct QueueKey {
    arrival_slot: u64,
    id: RequestId,
}

impl QueueKey {
    fn of(req: &Request) -> Self {
        QueueKey {
            arrival_slot: req.arrival_slot,
            id: req.id,
        }
    }
}

/// Restricts a queue view to a subset of workload types. Filters compose to
/// the depth needed by nested type-priority scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypeFilter {
    All,
    Only(u16),
    Except(u16),
    ExceptTwo(u16, u16),
    Empty,
}

impl TypeFilter {
    pub fn matches(&self, tag: u16) -> bool {
        match *self {
            TypeFilter::All => true,
            TypeFilter::Only(t) => tag == t,
            TypeFilter::Except(t) => tag != t,
            TypeFilter::ExceptTwo(a, b) => tag != a && tag != b,
            TypeFilter::Empty => false,
        }
    }

    /// Intersect with "only type `t`".
    pub fn and_only(&self, t: u16) -> TypeFilter {
        if self.matches(t) {
            TypeFilter::Only(t)
        } else {
            TypeFilter::Empty
        }
    }

    /// Intersect with "everything but type `t`".
    pub fn and_except(&self, t: u16) -> TypeFilter {
        match *self {
            TypeFilter::All => TypeFilter::Except(t),
            TypeFilter::Only(o) if o == t => TypeFilter::Empty,
            TypeFilter::Only(o) => TypeFilter::Only(o),
            TypeFilter::Except(e) if e == t => TypeFilter::Except(e),
            TypeFilter::Except(e) => TypeFilter::ExceptTwo(e, t),
            TypeFilter::ExceptTwo(a, b) if a == t || b == t => TypeFilter::ExceptTwo(a, b),
            // Deeper nesting is rejected at config validation.
            TypeFilter::ExceptTwo(a, b) => TypeFilter::ExceptTwo(a, b),
            TypeFilter::Empty => TypeFilter::Empty,
        }
    }
}

#[derive(Debug, Default, Clone)]
struct TypeBucket {
    order: BTreeSet<QueueKey>,
    /// Unprocessed tokens of this phase held by requests in the bucket.
    tokens: u64,
}

#[derive(Debug, Default, Clone)]
struct PhaseIndex {
    order: BTreeSet<QueueKey>,
    buckets: Vec<TypeBucket>,
    tokens: u64,
}

impl PhaseIndex {
    fn bucket_mut(&mut self, tag: u16) -> &mut TypeBucket {
        let idx = tag as usize;
        if idx >= self.buckets.len() {
            self.buckets.resize_with(idx + 1, TypeBucket::default);
        }
        &mut self.buckets[idx]
    }

    fn insert(&mut self, key: QueueKey, tag: u16, tokens: u64) {
        self.order.insert(key);
        let bucket = self.bucket_mut(tag);
        bucket.order.insert(key);
        bucket.tokens += tokens;
        self.tokens += tokens;
    }

    /// Removes a member carrying `tokens` unprocessed tokens of this phase.
    fn remove(&mut self, key: QueueKey, tag: u16, tokens: u64) {
        let present = self.order.remove(&key);
        debug_assert!(present);
        let bucket = self.bucket_mut(tag);
        bucket.order.remove(&key);
        bucket.tokens -= tokens;
        self.tokens -= tokens;
    }

    fn debit(&mut self, tag: u16, tokens: u64) {
        self.tokens -= tokens;
        self.bucket_mut(tag).tokens -= tokens;
    }

    fn bucket_tokens(&self, tag: u16) -> u64 {
        self.buckets.get(tag as usize).map_or(0, |b| b.tokens)
    }

    fn bucket_len(&self, tag: u16) -> usize {
        self.buckets.get(tag as usize).map_or(0, |b| b.order.len())
    }

    fn filtered_tokens(&self, filter: TypeFilter) -> u64 {
        match filter {
            TypeFilter::All => self.tokens,
            TypeFilter::Only(t) => self.bucket_tokens(t),
            TypeFilter::Except(t) => self.tokens - self.bucket_tokens(t),
            TypeFilter::ExceptTwo(a, b) => {
                self.tokens - self.bucket_tokens(a) - self.bucket_tokens(b)
            }
            TypeFilter::Empty => 0,
        }
    }

    fn filtered_len(&self, filter: TypeFilter) -> usize {
        match filter {
            TypeFilter::All => self.order.len(),
            TypeFilter::Only(t) => self.bucket_len(t),
            TypeFilter::Except(t) => self.order.len() - self.bucket_len(t),
            TypeFilter::ExceptTwo(a, b) => {
                self.order.len() - self.bucket_len(a) - self.bucket_len(b)
            }
            TypeFilter::Empty => 0,
        }
    }
}

/// Outcome of applying one plan entry to the queue.
#[derive(Debug, Default)]
pub struct ApplyOutcome {
    /// The entry consumed the request's last prefill tokens; it is now in
    /// the decode phase.
    pub prefill_finished: bool,
    /// The entry consumed the request's last decode token; the request has
    /// been removed from the queue.
    pub departed: Option<Request>,
}

/// FCFS request queue with per-phase and per-type order indices.
#[derive(Debug, Default, Clone)]
pub struct RequestQueue {
    entries: HashMap<RequestId, Request>,
    prefill: PhaseIndex,
    decode: PhaseIndex,
    /// Decode tokens still hidden behind unfinished prefills.
    pending_decode_tokens: u64,
}

impl RequestQueue {
    pub fn new() -> Self {
        RequestQueue::default()
    }

    /// Builds a queue from a request list; FCFS order follows the requests'
    /// arrival slots and ids, not the list order. `_type_capacity` is a
    /// sizing hint only.
    pub fn from_requests(requests: Vec<Request>, _type_capacity: usize) -> Self {
        let mut q = RequestQueue::new();
        for r in requests {
            q.push(r);
        }
        q
    }

    pub fn push(&mut self, req: Request) {
        debug_assert!(req.decode_remaining > 0, "departed request pushed");
        debug_assert!(req.check_invariants());
        let key = QueueKey::of(&req);
        match req.phase() {
            Phase::Prefill => {
                self.prefill
                    .insert(key, req.type_tag, req.prefill_remaining as u64);
                self.pending_decode_tokens += req.decode_remaining as u64;
            }
            Phase::Decode => {
                self.decode
                    .insert(key, req.type_tag, req.decode_remaining as u64);
            }
        }
        let clash = self.entries.insert(req.id, req);
        debug_assert!(clash.is_none(), "duplicate request id in one queue");
    }

    pub fn get(&self, id: RequestId) -> Option<&Request> {
        self.entries.get(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Unprocessed tokens over all queued requests, both phases, including
    /// decode tokens of requests still in prefill.
    pub fn total_unprocessed_tokens(&self) -> u64 {
        self.prefill.tokens + self.decode.tokens + self.pending_decode_tokens
    }

    /// Unprocessed prefill tokens in the filtered view.
    pub fn prefill_tokens(&self, filter: TypeFilter) -> u64 {
        self.prefill.filtered_tokens(filter)
    }

    /// Number of decode-phase requests in the filtered view.
    pub fn decode_count(&self, filter: TypeFilter) -> usize {
        self.decode.filtered_len(filter)
    }

    pub fn prefill_count(&self, filter: TypeFilter) -> usize {
        self.prefill.filtered_len(filter)
    }

    /// The work-conserving feasibility sum: unprocessed prefill tokens plus
    /// one per decode-phase request, at least the budget.
    pub fn work_conserving_feasible(&self, filter: TypeFilter, budget: u64) -> bool {
        self.prefill_tokens(filter) + self.decode_count(filter) as u64 >= budget
    }

    /// FCFS iteration over requests of one phase, restricted to `filter`.
    pub fn phase_iter(&self, phase: Phase, filter: TypeFilter) -> PhaseIter<'_> {
        let index = match phase {
            Phase::Prefill => &self.prefill,
            Phase::Decode => &self.decode,
        };
        let keys: Box<dyn Iterator<Item = &QueueKey>> = match filter {
            TypeFilter::Only(t) => match index.buckets.get(t as usize) {
                Some(bucket) => Box::new(bucket.order.iter()),
                None => Box::new(std::iter::empty()),
            },
            TypeFilter::Empty => Box::new(std::iter::empty()),
            _ => Box::new(index.order.iter()),
        };
        PhaseIter {
            queue: self,
            keys,
            filter,
        }
    }

    /// FCFS iteration across both phases (oldest first), restricted to
    /// `filter`.
    pub fn all_iter(&self, filter: TypeFilter) -> AllIter<'_> {
        AllIter {
            queue: self,
            prefill: self.prefill.order.iter().peekable(),
            decode: self.decode.order.iter().peekable(),
            filter,
        }
    }

    /// Applies one plan entry: debits tokens, moves the request to the
    /// decode phase when its prefill completes, and removes it when its last
    /// decode token is consumed. Callers must validate the plan first.
    pub fn apply_entry(
        &mut self,
        id: RequestId,
        delta_p: u32,
        delta_d: u32,
    ) -> Result<ApplyOutcome, CoreError> {
        let req = self.entries.get_mut(&id).ok_or(CoreError::UnknownRequest(id))?;
        let key = QueueKey::of(req);
        let tag = req.type_tag;
        let mut outcome = ApplyOutcome::default();

        if delta_p > 0 {
            debug_assert!(delta_p <= req.prefill_remaining);
            req.prefill_remaining -= delta_p;
            self.prefill.debit(tag, delta_p as u64);
            if req.prefill_remaining == 0 {
                let decode_tokens = req.decode_remaining as u64;
                self.prefill.remove(key, tag, 0);
                self.decode.insert(key, tag, decode_tokens);
                self.pending_decode_tokens -= decode_tokens;
                outcome.prefill_finished = true;
            }
        }

        if delta_d > 0 {
            debug_assert!(delta_d == 1 && req.prefill_remaining == 0);
            req.decode_remaining -= 1;
            self.decode.debit(tag, 1);
            if req.decode_remaining == 0 {
                self.decode.remove(key, tag, 0);
                outcome.departed = self.entries.remove(&id);
            }
        }

        Ok(outcome)
    }

    /// All queued requests in FCFS order; intended for tests and debugging.
    pub fn snapshot(&self) -> Vec<Request> {
        self.all_iter(TypeFilter::All).cloned().collect()
    }
}

pub struct PhaseIter<'a> {
    queue: &'a RequestQueue,
    keys: Box<dyn Iterator<Item = &'a QueueKey> + 'a>,
    filter: TypeFilter,
}

impl<'a> Iterator for PhaseIter<'a> {
    type Item = &'a Request;

    fn next(&mut self) -> Option<Self::Item> {
        for key in self.keys.by_ref() {
            let req = &self.queue.entries[&key.id];
            if self.filter.matches(req.type_tag) {
                return Some(req);
            }
        }
        None
    }
}

pub struct AllIter<'a> {
    queue: &'a RequestQueue,
    prefill: std::iter::Peekable<std::collections::btree_set::Iter<'a, QueueKey>>,
    decode: std::iter::Peekable<std::collections::btree_set::Iter<'a, QueueKey>>,
    filter: TypeFilter,
}

impl<'a> Iterator for AllIter<'a> {
    type Item = &'a Request;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let take_prefill = match (self.prefill.peek(), self.decode.peek()) {
                (Some(p), Some(d)) => p < d,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => return None,
            };
            let key = if take_prefill {
                self.prefill.next().unwrap()
            } else {
                self.decode.next().unwrap()
            };
            let req = &self.queue.entries[&key.id];
            if self.filter.matches(req.type_tag) {
                return Some(req);
            }
        }
    }
}
