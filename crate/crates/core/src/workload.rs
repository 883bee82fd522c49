//! Workload generation: arrival processes and token-size distributions.
//!
//! All sampling is driven by a caller-supplied seeded generator; identical
//! seeds give bit-identical sample streams. Token sizes live in {1, 2, ...},
//! so the Poisson size model is shifted: 1 + Poisson(mean - 1).

use rand::Rng;
use rand_distr::Distribution as RandDistribution;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Token-size distribution with support in {1, 2, ...}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Deterministic {
        k: u64,
    },
    ShiftedPoisson {
        mean: f64,
    },
    Geometric {
        mean: f64,
    },
    UniformInt {
        lo: u64,
        hi: u64,
    },
    Empirical {
        #[serde(default)]
        entries: Vec<(u64, f64)>,
        /// Optional two-column CSV source (value,weight; header required),
        /// resolved into `entries` at config load.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        csv: Option<String>,
    },
}

impl Distribution {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            Distribution::Deterministic { k } if *k >= 1 => Ok(()),
            Distribution::Deterministic { .. } => {
                Err(ConfigError::new("deterministic token size must be >= 1"))
            }
            Distribution::ShiftedPoisson { mean } | Distribution::Geometric { mean } => {
                if *mean >= 1.0 && mean.is_finite() {
                    Ok(())
                } else {
                    Err(ConfigError::new("distribution mean must be >= 1"))
                }
            }
            Distribution::UniformInt { lo, hi } => {
                if *lo >= 1 && lo <= hi {
                    Ok(())
                } else {
                    Err(ConfigError::new("uniform_int requires 1 <= lo <= hi"))
                }
            }
            Distribution::Empirical { entries, csv } => {
                if csv.is_some() {
                    return Err(ConfigError::new(
                        "empirical csv source was not resolved before use",
                    ));
                }
                if entries.is_empty() {
                    return Err(ConfigError::new("empirical distribution has no entries"));
                }
                let mut total = 0.0;
                for (value, weight) in entries {
                    if *value < 1 {
                        return Err(ConfigError::new("empirical values must be >= 1"));
                    }
                    if !weight.is_finite() || *weight < 0.0 {
                        return Err(ConfigError::new("empirical weights must be >= 0"));
                    }
                    total += weight;
                }
                if total <= 0.0 {
                    return Err(ConfigError::new("empirical weights must sum to > 0"));
                }
                Ok(())
            }
        }
    }

    /// Analytic mean of the distribution.
    pub fn mean(&self) -> f64 {
        match self {
            Distribution::Deterministic { k } => *k as f64,
            Distribution::ShiftedPoisson { mean } | Distribution::Geometric { mean } => *mean,
            Distribution::UniformInt { lo, hi } => (*lo + *hi) as f64 / 2.0,
            Distribution::Empirical { entries, .. } => {
                let total: f64 = entries.iter().map(|(_, w)| w).sum();
                entries.iter().map(|(v, w)| *v as f64 * w).sum::<f64>() / total
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        match self {
            Distribution::Deterministic { k } => *k,
            Distribution::ShiftedPoisson { mean } => {
                let lambda = mean - 1.0;
                if lambda <= 0.0 {
                    1
                } else {
                    1 + rand_distr::Poisson::new(lambda).expect("validated").sample(rng) as u64
                }
            }
            Distribution::Geometric { mean } => {
                // Trials until first success with p = 1/mean.
                let p = (1.0 / mean).clamp(f64::MIN_POSITIVE, 1.0);
                1 + rand_distr::Geometric::new(p).expect("validated").sample(rng)
            }
            Distribution::UniformInt { lo, hi } => rng.random_range(*lo..=*hi),
            Distribution::Empirical { entries, .. } => {
                let total: f64 = entries.iter().map(|(_, w)| w).sum();
                let mut target = rng.random::<f64>() * total;
                for (value, weight) in entries {
                    if target < *weight {
                        return *value;
                    }
                    target -= weight;
                }
                entries.last().expect("validated nonempty").0
            }
        }
    }

    /// Parses a two-column CSV body (value,weight). The header row is
    /// required and skipped.
    pub fn from_csv_str(body: &str) -> Result<Distribution, ConfigError> {
        let mut lines = body.lines();
        if lines.next().is_none() {
            return Err(ConfigError::new("empirical csv is empty (header required)"));
        }
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let parse = |field: Option<&str>, what: &str| -> Result<f64, ConfigError> {
                field
                    .map(str::trim)
                    .ok_or_else(|| {
                        ConfigError::new(format!("csv line {}: missing {what}", lineno + 2))
                    })?
                    .parse::<f64>()
                    .map_err(|e| {
                        ConfigError::new(format!("csv line {}: bad {what}: {e}", lineno + 2))
                    })
            };
            let value = parse(cols.next(), "value")?;
            let weight = parse(cols.next(), "weight")?;
            if cols.next().is_some() {
                return Err(ConfigError::new(format!(
                    "csv line {}: expected exactly two columns",
                    lineno + 2
                )));
            }
            if value < 1.0 || value.fract() != 0.0 {
                return Err(ConfigError::new(format!(
                    "csv line {}: value must be an integer >= 1",
                    lineno + 2
                )));
            }
            entries.push((value as u64, weight));
        }
        let dist = Distribution::Empirical {
            entries,
            csv: None,
        };
        dist.validate()?;
        Ok(dist)
    }

    pub fn from_csv_path(path: &std::path::Path) -> Result<Distribution, ConfigError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("cannot read {}: {e}", path.display())))?;
        Distribution::from_csv_str(&body)
    }
}

/// Per-slot arrival process. The mean number of arrivals per slot is the
/// process rate; multiple arrivals in one slot are allowed for `poisson`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalProcess {
    Bernoulli { p: f64 },
    Poisson { rate: f64 },
    Deterministic { period: u64 },
}

impl ArrivalProcess {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            ArrivalProcess::Bernoulli { p } if (0.0..=1.0).contains(p) => Ok(()),
            ArrivalProcess::Bernoulli { .. } => {
                Err(ConfigError::new("bernoulli p must be in [0, 1]"))
            }
            ArrivalProcess::Poisson { rate } if rate.is_finite() && *rate >= 0.0 => Ok(()),
            ArrivalProcess::Poisson { .. } => Err(ConfigError::new("poisson rate must be >= 0")),
            ArrivalProcess::Deterministic { period } if *period >= 1 => Ok(()),
            ArrivalProcess::Deterministic { .. } => {
                Err(ConfigError::new("deterministic period must be >= 1"))
            }
        }
    }

    /// Mean arrivals per slot.
    pub fn rate(&self) -> f64 {
        match self {
            ArrivalProcess::Bernoulli { p } => *p,
            ArrivalProcess::Poisson { rate } => *rate,
            ArrivalProcess::Deterministic { period } => 1.0 / *period as f64,
        }
    }
}

/// Number of requests arriving in the given slot.
pub fn sample_arrivals(process: &ArrivalProcess, slot: u64, rng: &mut impl Rng) -> u64 {
    match process {
        ArrivalProcess::Bernoulli { p } => {
            if *p > 0.0 && rng.random_bool(*p) {
                1
            } else {
                0
            }
        }
        ArrivalProcess::Poisson { rate } => {
            if *rate <= 0.0 {
                0
            } else {
                rand_distr::Poisson::new(*rate).expect("validated").sample(rng) as u64
            }
        }
        ArrivalProcess::Deterministic { period } => u64::from(slot % period == 0),
    }
}

/// One step of a request type's workflow: which engine serves it and the
/// token-size distributions for that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub target_engine: u32,
    pub prefill_dist: Distribution,
    pub decode_dist: Distribution,
}

/// A request type: its arrival share and its ordered workflow stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTypeSpec {
    pub probability: f64,
    pub stages: Vec<StageSpec>,
}

/// The full workload: one arrival process plus the type mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub arrivals: ArrivalProcess,
    pub types: Vec<RequestTypeSpec>,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.arrivals.validate()?;
        if self.types.is_empty() {
            return Err(ConfigError::new("workload has no request types"));
        }
        let mut total = 0.0;
        for (i, ty) in self.types.iter().enumerate() {
            if !(0.0..=1.0).contains(&ty.probability) {
                return Err(ConfigError::new(format!(
                    "type {i}: probability must be in [0, 1]"
                )));
            }
            total += ty.probability;
            if ty.stages.is_empty() {
                return Err(ConfigError::new(format!("type {i}: stages must be nonempty")));
            }
            for stage in &ty.stages {
                stage.prefill_dist.validate()?;
                stage.decode_dist.validate()?;
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(ConfigError::new(format!(
                "type probabilities sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// Resolves any `csv` empirical sources relative to `base`.
    pub fn resolve_csv_sources(&mut self, base: &std::path::Path) -> Result<(), ConfigError> {
        for ty in &mut self.types {
            for stage in &mut ty.stages {
                for dist in [&mut stage.prefill_dist, &mut stage.decode_dist] {
                    if let Distribution::Empirical { csv: Some(path), .. } = dist {
                        let full = base.join(path.clone());
                        *dist = Distribution::from_csv_path(&full)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn max_type_tag(&self) -> u16 {
        (self.types.len() - 1) as u16
    }
}

/// Pre-sampled token sizes for every stage of one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledStage {
    pub target_engine: u32,
    pub prefill: u64,
    pub decode: u64,
}

/// Draws a request type and the token sizes for all of its stages. Sizes
/// for later stages are fixed at arrival time, independent of scheduling.
pub fn sample_request_stages(
    types: &[RequestTypeSpec],
    rng: &mut impl Rng,
) -> (u16, Vec<SampledStage>) {
    let mut target = rng.random::<f64>();
    let mut tag = types.len() - 1;
    for (i, ty) in types.iter().enumerate() {
        if target < ty.probability {
            tag = i;
            break;
        }
        target -= ty.probability;
    }
    let stages = types[tag]
        .stages
        .iter()
        .map(|s| SampledStage {
            target_engine: s.target_engine,
            prefill: s.prefill_dist.sample(rng),
            decode: s.decode_dist.sample(rng),
        })
        .collect();
    (tag as u16, stages)
}

/// Draws a request type and its stage-0 token sizes.
pub fn sample_request(types: &[RequestTypeSpec], rng: &mut impl Rng) -> (u16, u64, u64) {
    let (tag, stages) = sample_request_stages(types, rng);
    (tag, stages[0].prefill, stages[0].decode)
}

/// Analytic per-type and mixture-weighted mean token sizes. Per-type means
/// sum over all stages of the type's workflow.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanTokens {
    /// (m_p, m_d) per type, summed over stages.
    pub per_type: Vec<(f64, f64)>,
    /// Mixture-weighted (m_p, m_d).
    pub mixture: (f64, f64),
}

pub fn mean_tokens(types: &[RequestTypeSpec]) -> MeanTokens {
    let per_type: Vec<(f64, f64)> = types
        .iter()
        .map(|ty| {
            ty.stages.iter().fold((0.0, 0.0), |(p, d), s| {
                (p + s.prefill_dist.mean(), d + s.decode_dist.mean())
            })
        })
        .collect();
    let mixture = types
        .iter()
        .zip(&per_type)
        .fold((0.0, 0.0), |(p, d), (ty, (mp, md))| {
            (p + ty.probability * mp, d + ty.probability * md)
        });
    MeanTokens { per_type, mixture }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn single_type(prefill: Distribution, decode: Distribution) -> Vec<RequestTypeSpec> {
        vec![RequestTypeSpec {
            probability: 1.0,
            stages: vec![StageSpec {
                target_engine: 0,
                prefill_dist: prefill,
                decode_dist: decode,
            }],
        }]
    }

    #[test]
    fn deterministic_arrivals_fire_on_period_multiples() {
        let process = ArrivalProcess::Deterministic { period: 4 };
        let mut r = rng(0);
        for slot in 1..=12 {
            let expect = u64::from(slot % 4 == 0);
            assert_eq!(sample_arrivals(&process, slot, &mut r), expect);
        }
    }

    #[test]
    fn zero_rate_bernoulli_never_arrives() {
        let process = ArrivalProcess::Bernoulli { p: 0.0 };
        let mut r = rng(0);
        assert!((1..=1000).all(|slot| sample_arrivals(&process, slot, &mut r) == 0));
    }

    #[test]
    fn poisson_arrival_rate_matches_over_a_million_slots() {
        // Per-type rate used for the two-agent network at 90% load:
        // 0.9 * 768 / (64 + 544).
        let rate = 0.9 * 768.0 / 608.0;
        let process = ArrivalProcess::Poisson { rate };
        let mut r = rng(7);
        let total: u64 = (1..=1_000_000)
            .map(|slot| sample_arrivals(&process, slot, &mut r))
            .sum();
        let empirical = total as f64 / 1_000_000.0;
        assert!(
            (empirical - rate).abs() / rate < 0.01,
            "empirical rate {empirical} vs {rate}"
        );
    }

    #[test]
    fn fixed_sizes_reproduce_the_measured_workload() {
        let types = single_type(
            Distribution::Deterministic { k: 129 },
            Distribution::Deterministic { k: 112 },
        );
        let mut r = rng(3);
        for _ in 0..32 {
            assert_eq!(sample_request(&types, &mut r), (0, 129, 112));
        }
    }

    #[test]
    fn shifted_poisson_sample_mean_tracks_declared_mean() {
        let types = single_type(
            Distribution::ShiftedPoisson { mean: 32.0 },
            Distribution::ShiftedPoisson { mean: 32.0 },
        );
        let mut r = rng(11);
        let n = 100_000u64;
        let (mut sp, mut sd) = (0u64, 0u64);
        for _ in 0..n {
            let (_, p, d) = sample_request(&types, &mut r);
            sp += p;
            sd += d;
        }
        let mp = sp as f64 / n as f64;
        let md = sd as f64 / n as f64;
        assert!((mp - 32.0).abs() / 32.0 < 0.02, "prefill mean {mp}");
        assert!((md - 32.0).abs() / 32.0 < 0.02, "decode mean {md}");
    }

    #[test]
    fn point_mass_empirical_is_constant() {
        let dist = Distribution::Empirical {
            entries: vec![(5, 1.0)],
            csv: None,
        };
        let mut r = rng(0);
        assert!((0..100).all(|_| dist.sample(&mut r) == 5));
    }

    #[test]
    fn mean_tokens_reports_analytic_means() {
        let types = single_type(
            Distribution::Deterministic { k: 129 },
            Distribution::Deterministic { k: 112 },
        );
        let m = mean_tokens(&types);
        assert_eq!(m.per_type, vec![(129.0, 112.0)]);
        assert_eq!(m.mixture, (129.0, 112.0));

        let two = vec![
            RequestTypeSpec {
                probability: 0.5,
                stages: vec![StageSpec {
                    target_engine: 0,
                    prefill_dist: Distribution::Deterministic { k: 10 },
                    decode_dist: Distribution::Deterministic { k: 10 },
                }],
            },
            RequestTypeSpec {
                probability: 0.5,
                stages: vec![StageSpec {
                    target_engine: 0,
                    prefill_dist: Distribution::Deterministic { k: 30 },
                    decode_dist: Distribution::Deterministic { k: 50 },
                }],
            },
        ];
        let m = mean_tokens(&two);
        assert_eq!(m.mixture, (20.0, 30.0));

        assert_eq!(Distribution::ShiftedPoisson { mean: 512.0 }.mean(), 512.0);
    }

    #[test]
    fn identical_seeds_give_identical_streams() {
        let types = single_type(
            Distribution::Geometric { mean: 40.0 },
            Distribution::UniformInt { lo: 1, hi: 99 },
        );
        let process = ArrivalProcess::Poisson { rate: 0.7 };
        let run = |seed: u64| {
            let mut r = rng(seed);
            let mut log = Vec::new();
            for slot in 1..=500 {
                let n = sample_arrivals(&process, slot, &mut r);
                for _ in 0..n {
                    log.push(sample_request(&types, &mut r));
                }
            }
            log
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn sample_means_match_analytic_means_for_every_kind() {
        let kinds = vec![
            Distribution::Deterministic { k: 17 },
            Distribution::ShiftedPoisson { mean: 64.0 },
            Distribution::Geometric { mean: 12.0 },
            Distribution::UniformInt { lo: 3, hi: 41 },
            Distribution::Empirical {
                entries: vec![(2, 1.0), (10, 3.0), (50, 0.5)],
                csv: None,
            },
        ];
        let n = 1_000_000u64;
        for dist in kinds {
            let mut r = rng(99);
            let mut sum = 0u64;
            let mut min = u64::MAX;
            for _ in 0..n {
                let v = dist.sample(&mut r);
                sum += v;
                min = min.min(v);
            }
            let empirical = sum as f64 / n as f64;
            let analytic = dist.mean();
            assert!(
                (empirical - analytic).abs() / analytic < 0.01,
                "{dist:?}: empirical {empirical} vs analytic {analytic}"
            );
            assert!(min >= 1, "{dist:?} sampled a token size below 1");
        }
    }

    #[test]
    fn type_mixture_respects_probabilities() {
        let types = vec![
            RequestTypeSpec {
                probability: 0.25,
                stages: vec![StageSpec {
                    target_engine: 0,
                    prefill_dist: Distribution::Deterministic { k: 1 },
                    decode_dist: Distribution::Deterministic { k: 1 },
                }],
            },
            RequestTypeSpec {
                probability: 0.75,
                stages: vec![StageSpec {
                    target_engine: 0,
                    prefill_dist: Distribution::Deterministic { k: 1 },
                    decode_dist: Distribution::Deterministic { k: 1 },
                }],
            },
        ];
        let mut r = rng(5);
        let n = 200_000;
        let ones = (0..n)
            .filter(|_| sample_request(&types, &mut r).0 == 1)
            .count();
        let frac = ones as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.01, "type-1 fraction {frac}");
    }

    #[test]
    fn csv_empirical_requires_header_and_two_columns() {
        let dist = Distribution::from_csv_str("value,weight\n5,1.0\n9,2.0\n").unwrap();
        match &dist {
            Distribution::Empirical { entries, .. } => {
                assert_eq!(entries, &vec![(5, 1.0), (9, 2.0)]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!((dist.mean() - (5.0 + 18.0) / 3.0).abs() < 1e-12);

        assert!(Distribution::from_csv_str("").is_err());
        assert!(Distribution::from_csv_str("value,weight\n5\n").is_err());
        assert!(Distribution::from_csv_str("value,weight\n5,1.0,9\n").is_err());
        assert!(Distribution::from_csv_str("value,weight\n0,1.0\n").is_err());
    }

    #[test]
    fn workload_validation_rejects_bad_probability_sums() {
        let mut spec = WorkloadSpec {
            arrivals: ArrivalProcess::Bernoulli { p: 0.5 },
            types: vec![RequestTypeSpec {
                probability: 0.5,
                stages: vec![StageSpec {
                    target_engine: 0,
                    prefill_dist: Distribution::Deterministic { k: 1 },
                    decode_dist: Distribution::Deterministic { k: 1 },
                }],
            }],
        };
        assert!(spec.validate().is_err());
        spec.types[0].probability = 1.0;
        assert!(spec.validate().is_ok());
    }
}
