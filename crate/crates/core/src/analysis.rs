//! Analytic load computations and trajectory diagnostics.
//!
//! Stability here is a statistical verdict over a finite trace, not a
//! proof: the detector fits an OLS slope to the unprocessed-token count
//! over the tail of the horizon and compares it against an explicit
//! threshold. Thresholds, windows, and confidence bounds are recorded in
//! the verdict so runs can be audited.

use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::error::CoreError;

/// One sampled point of an engine trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceSample {
    pub slot: u64,
    pub engine: u32,
    /// Requests in prefill / decode phase.
    pub z_p: u64,
    pub z_d: u64,
    /// Unprocessed prefill tokens, and unprocessed decode tokens over all
    /// in-system requests (so w_p + w_d is the total unprocessed count).
    pub w_p: u64,
    pub w_d: u64,
    /// Token load of a batch started exactly at this slot, else 0.
    pub batch_token_load: u64,
    /// Cumulative requests fully completed.
    pub f_d_cum: u64,
}

impl TraceSample {
    pub fn total_tokens(&self) -> u64 {
        self.w_p + self.w_d
    }
}

/// Offered load versus capacity for one engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineLoad {
    pub offered_tokens_per_slot: f64,
    pub capacity_tokens_per_slot: f64,
    /// Load factor: offered work per unit of capacity.
    pub rho: f64,
    /// Spare capacity in tokens per slot (negative when overloaded).
    pub margin: f64,
    /// Slots to process a full-budget batch.
    pub t_b: u64,
}

/// Load factor for an engine facing the given offered token rate
/// (tokens per slot; callers aggregate `lambda * (m_p + m_d)` over the
/// request classes routed to this engine, dividing by the pool size for
/// balanced parallel engines).
pub fn load_factor(offered_tokens_per_slot: f64, config: &EngineConfig) -> EngineLoad {
    let t_b = config.full_batch_slots();
    let capacity = config.token_budget as f64 / t_b as f64;
    EngineLoad {
        offered_tokens_per_slot,
        capacity_tokens_per_slot: capacity,
        rho: offered_tokens_per_slot / capacity,
        margin: capacity - offered_tokens_per_slot,
        t_b,
    }
}

/// Request counts and mean token sizes for one class of work at an engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassLoad {
    pub z_p: u64,
    pub z_d: u64,
    pub m_p: f64,
    pub m_d: f64,
}

/// Expected remaining token work in the system: a prefill-phase request
/// still carries its full `m_p + m_d`, a decode-phase request only `m_d`.
/// Draining this workload at full capacity with arrivals shut off takes
/// `lyapunov_workload / (b / t_b)` slots, which is what makes it the
/// natural drift diagnostic.
pub fn lyapunov_workload(classes: &[ClassLoad]) -> f64 {
    classes
        .iter()
        .map(|c| (c.m_p + c.m_d) * c.z_p as f64 + c.m_d * c.z_d as f64)
        .sum()
}

/// Fluid-model time for a work-conserving engine to clear an initial
/// workload of `f0` tokens: `f0 / delta` where `delta` is the per-slot
/// drain rate `b/t_b - offered`. Errors when the load factor is >= 1.
pub fn fluid_time_to_empty(
    f0: f64,
    offered_tokens_per_slot: f64,
    config: &EngineConfig,
) -> Result<f64, CoreError> {
    let load = load_factor(offered_tokens_per_slot, config);
    if load.rho >= 1.0 {
        return Err(CoreError::Overloaded { rho: load.rho });
    }
    Ok(f0 / load.margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Stable,
    Unstable,
    Inconclusive,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Classification::Stable => "stable",
            Classification::Unstable => "unstable",
            Classification::Inconclusive => "inconclusive",
        };
        f.write_str(s)
    }
}

/// Detector parameters; every field is echoed into the verdict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityParams {
    /// Fraction of the trace (from the end) used for the fit.
    pub window_fraction: f64,
    /// Slope threshold in tokens per slot.
    pub theta: f64,
    pub min_samples: usize,
}

impl StabilityParams {
    pub fn new(theta: f64) -> Self {
        StabilityParams {
            window_fraction: 0.5,
            theta,
            min_samples: 10,
        }
    }

    pub fn with_window_fraction(mut self, f: f64) -> Self {
        self.window_fraction = f;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityVerdict {
    pub classification: Classification,
    /// OLS slope of unprocessed tokens per slot over the window.
    pub slope: f64,
    pub slope_ci_low: f64,
    pub slope_ci_high: f64,
    /// Slot range the fit used.
    pub window: (u64, u64),
    pub theta: f64,
}

/// Classifies a `(slot, tokens)` trajectory.
///
/// Over the last `window_fraction` of the trace: unstable when the fitted
/// slope exceeds `theta` with its lower confidence bound above zero; stable
/// when the slope is within `theta` and the level shows no compounding
/// growth (median of the window's second half within 3x the first half's,
/// up to drift `theta` over the window); inconclusive otherwise.
pub fn detect_stability(
    samples: &[(u64, f64)],
    params: &StabilityParams,
) -> Result<StabilityVerdict, CoreError> {
    let need = params.min_samples.max(3);
    if samples.len() < need {
        return Err(CoreError::TooFewSamples {
            got: samples.len(),
            need,
        });
    }
    let window_len = ((samples.len() as f64 * params.window_fraction).ceil() as usize)
        .clamp(need, samples.len());
    let window = &samples[samples.len() - window_len..];
    let (slope, se) = ols_slope(window);
    let ci = 1.96 * se;
    let (slope_ci_low, slope_ci_high) = (slope - ci, slope + ci);
    let span_slots = (window[window.len() - 1].0 - window[0].0) as f64;

    let classification = if slope > params.theta && slope_ci_low > 0.0 {
        Classification::Unstable
    } else {
        let half = window.len() / 2;
        let med_first = median(window[..half].iter().map(|s| s.1));
        let med_second = median(window[half..].iter().map(|s| s.1));
        let no_growth = med_second <= 3.0 * med_first + params.theta * span_slots;
        if slope.abs() <= params.theta && no_growth {
            Classification::Stable
        } else {
            Classification::Inconclusive
        }
    };

    Ok(StabilityVerdict {
        classification,
        slope,
        slope_ci_low,
        slope_ci_high,
        window: (window[0].0, window[window.len() - 1].0),
        theta: params.theta,
    })
}

/// OLS slope and its standard error for y over x.
fn ols_slope(points: &[(u64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in points {
        let dx = *x as f64 - mean_x;
        sxx += dx * dx;
        sxy += dx * (y - mean_y);
    }
    if sxx == 0.0 {
        return (0.0, f64::INFINITY);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let rss: f64 = points
        .iter()
        .map(|(x, y)| {
            let r = y - (intercept + slope * *x as f64);
            r * r
        })
        .sum();
    let dof = (n - 2.0).max(1.0);
    let se = (rss / dof / sxx).sqrt();
    (slope, se)
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Latency and completion record of one finished request. For multi-stage
/// workflows, `arrival_slot` is the external arrival, `ttft_slots` measures
/// to the first stage's prefill completion, `e2e_slots` to the final
/// departure, and token totals sum over stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    pub id: u64,
    pub type_tag: u16,
    pub arrival_slot: u64,
    pub ttft_slots: u64,
    pub e2e_slots: u64,
    pub prefill_total: u64,
    pub decode_total: u64,
    /// Nearest-rank p99 of this request's decode-token gaps (0 when the
    /// request produced fewer than two decode tokens per stage).
    pub tbt_p99: u64,
}

/// Nearest-rank percentiles (no interpolation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Percentiles {
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
}

/// Nearest-rank percentile of a sorted slice: the ceil(p/100 * n)-th value.
pub fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn percentiles_of(mut values: Vec<u64>) -> Percentiles {
    values.sort_unstable();
    Percentiles {
        p50: nearest_rank(&values, 50.0),
        p90: nearest_rank(&values, 90.0),
        p99: nearest_rank(&values, 99.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatencySummary {
    pub completed: u64,
    pub ttft: Percentiles,
    /// Percentiles of the per-request TBT p99 values.
    pub tbt: Percentiles,
    pub e2e: Percentiles,
    pub requests_per_slot: f64,
    /// Token work of completed requests per slot.
    pub tokens_per_slot: f64,
}

/// Empirical latency percentiles and throughput over completed requests.
pub fn summarize_latency(records: &[RequestRecord], horizon: u64) -> LatencySummary {
    let completed = records.len() as u64;
    let tokens: u64 = records
        .iter()
        .map(|r| r.prefill_total + r.decode_total)
        .sum();
    let horizon = horizon.max(1);
    LatencySummary {
        completed,
        ttft: percentiles_of(records.iter().map(|r| r.ttft_slots).collect()),
        tbt: percentiles_of(records.iter().map(|r| r.tbt_p99).collect()),
        e2e: percentiles_of(records.iter().map(|r| r.e2e_slots).collect()),
        requests_per_slot: completed as f64 / horizon as f64,
        tokens_per_slot: tokens as f64 / horizon as f64,
    }
}
