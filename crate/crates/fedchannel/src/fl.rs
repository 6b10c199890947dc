//! Federated averaging: participant selection, update production, optional
//! gradient clipping, and aggregation `W_{t+1} = W_t + (α/n')·Σ updates`.
//!
//! Gradient sources come in three flavors used to separate learning effects
//! from channel effects: real local SGD on a shard, i.i.d. Gaussians with a
//! fixed deviation, and Gaussians replaying a per-(round, participant)
//! deviation trace recorded from an earlier run.

use crate::nn::{self, Dataset, MlpArchitecture};
use crate::prng::{derive, stream};
use crate::{ParamVec, UpdateVec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlError {
    #[error("participation schedule needs 1 <= n' <= n, got fraction {fraction} of {n}")]
    InvalidSchedule { n: usize, fraction: f64 },
    #[error("aggregator weight alpha must be positive")]
    InvalidAlpha,
    #[error("clip norm must be positive")]
    InvalidClipNorm,
    #[error("update length {got} does not match model length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no updates to aggregate")]
    EmptyUpdateSet,
    #[error("no shard for participant {participant}")]
    MissingShard { participant: usize },
    #[error("variance trace has no entry for round {round}, participant {participant}")]
    MissingTraceEntry { round: u32, participant: usize },
    #[error("gaussian gradient deviation must be positive")]
    InvalidSigma,
    #[error("malformed variance trace line {line}: {reason}")]
    MalformedTrace { line: usize, reason: String },
    #[error(transparent)]
    Nn(#[from] nn::NnError),
}

/// How the server picks the per-round participant subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionPolicy {
    /// Uniform without replacement, deterministic per (seed, round).
    Random { seed: u64 },
    /// Consecutive blocks of n' ids, cycling through the cohort.
    RoundRobin,
}

/// Per-round participation schedule; `n' = round(fraction * n)`.
#[derive(Debug, Clone, Copy)]
pub struct RoundSchedule {
    pub n: usize,
    pub fraction: f64,
    pub policy: SelectionPolicy,
}

impl RoundSchedule {
    pub fn new(n: usize, fraction: f64, policy: SelectionPolicy) -> Result<Self, FlError> {
        if n == 0 || !(fraction > 0.0 && fraction <= 1.0) {
            return Err(FlError::InvalidSchedule { n, fraction });
        }
        Ok(Self {
            n,
            fraction,
            policy,
        })
    }

    /// Round-half-up of `fraction·n`, clamped into `[1, n]`.
    pub fn n_prime(&self) -> usize {
        ((self.fraction * self.n as f64 + 0.5).floor() as usize).clamp(1, self.n.max(1))
    }
}

/// Ids contributing to global round `round` (1-based), ascending.
pub fn select_participants(schedule: &RoundSchedule, round: u32) -> Vec<usize> {
    let np = schedule.n_prime();
    match schedule.policy {
        SelectionPolicy::RoundRobin => {
            let start = ((round as usize).saturating_sub(1) * np) % schedule.n;
            let mut ids: Vec<usize> = (0..np).map(|i| (start + i) % schedule.n).collect();
            ids.sort_unstable();
            ids
        }
        SelectionPolicy::Random { seed } => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive(seed, &[stream::SELECT, u64::from(round)]));
            let mut ids = rand::seq::index::sample(&mut rng, schedule.n, np).into_vec();
            ids.sort_unstable();
            ids
        }
    }
}

/// Server-side aggregation settings.
#[derive(Debug, Clone, Copy)]
pub struct AggregatorConfig {
    pub alpha: f64,
    pub clip_norm: Option<f64>,
}

impl AggregatorConfig {
    pub fn new(alpha: f64, clip_norm: Option<f64>) -> Result<Self, FlError> {
        if !(alpha > 0.0) {
            return Err(FlError::InvalidAlpha);
        }
        if let Some(c) = clip_norm {
            if !(c > 0.0) {
                return Err(FlError::InvalidClipNorm);
            }
        }
        Ok(Self { alpha, clip_norm })
    }
}

/// Scales the update down to `max_norm` when it exceeds it; direction kept.
pub fn clip_update(update: &[f64], max_norm: f64) -> UpdateVec {
    let norm = update.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= max_norm || norm == 0.0 {
        update.to_vec()
    } else {
        let s = max_norm / norm;
        update.iter().map(|v| v * s).collect()
    }
}

/// `W_{t+1} = W_t + (α/n')·Σ updates`, clipping each update first when
/// configured. Updates must be passed in ascending participant-id order for
/// bit-reproducible sums.
pub fn aggregate(
    w_t: &[f64],
    updates: &[UpdateVec],
    cfg: &AggregatorConfig,
) -> Result<ParamVec, FlError> {
    if updates.is_empty() {
        return Err(FlError::EmptyUpdateSet);
    }
    for u in updates {
        if u.len() != w_t.len() {
            return Err(FlError::LengthMismatch {
                expected: w_t.len(),
                got: u.len(),
            });
        }
    }
    let scale = cfg.alpha / updates.len() as f64;
    let mut next = w_t.to_vec();
    match cfg.clip_norm {
        Some(max_norm) => {
            for u in updates {
                for (n, v) in next.iter_mut().zip(clip_update(u, max_norm)) {
                    *n += scale * v;
                }
            }
        }
        None => {
            for u in updates {
                for (n, &v) in next.iter_mut().zip(u) {
                    *n += scale * v;
                }
            }
        }
    }
    Ok(next)
}

/// Recorded per-(round, participant) update deviations, replayable as
/// Gaussian gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VarianceTrace {
    entries: Vec<(u32, usize, f64)>,
    index: HashMap<(u32, usize), f64>,
}

impl VarianceTrace {
    pub fn record(&mut self, round: u32, participant: usize, std: f64) {
        self.entries.push((round, participant, std));
        self.index.insert((round, participant), std);
    }

    pub fn std_for(&self, round: u32, participant: usize) -> Option<f64> {
        self.index.get(&(round, participant)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u32, usize, f64)] {
        &self.entries
    }

    /// CSV with columns `round,participant_id,std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,participant_id,std\n");
        for (round, pid, std) in &self.entries {
            let _ = writeln!(out, "{round},{pid},{std}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, FlError> {
        let mut trace = Self::default();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let malformed = |reason: &str| FlError::MalformedTrace {
                line: i + 1,
                reason: reason.to_string(),
            };
            let round = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| malformed("bad round"))?;
            let pid = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| malformed("bad participant id"))?;
            let std = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| malformed("bad std"))?;
            trace.record(round, pid, std);
        }
        Ok(trace)
    }
}

/// Where participant updates come from.
#[derive(Debug, Clone)]
pub enum GradientSource {
    /// Local SGD deltas on each participant's shard.
    Real {
        arch: MlpArchitecture,
        shards: Vec<Dataset>,
        lr: f64,
        local_epochs: usize,
        batch_size: usize,
    },
    /// i.i.d. zero-mean Gaussian entries with fixed deviation.
    FixedGaussian { sigma: f64 },
    /// Gaussian entries with deviation replayed from a recorded trace.
    RecordedVariance { trace: VarianceTrace },
}

impl GradientSource {
    /// Produces participant `participant`'s update for `round`. All modes are
    /// deterministic given `(master_seed, round, participant)`.
    pub fn produce_update(
        &self,
        participant: usize,
        w_t: &[f64],
        round: u32,
        master_seed: u64,
    ) -> Result<UpdateVec, FlError> {
        let update_seed = derive(
            master_seed,
            &[stream::UPDATE, u64::from(round), participant as u64],
        );
        match self {
            GradientSource::Real {
                arch,
                shards,
                lr,
                local_epochs,
                batch_size,
            } => {
                let shard = shards
                    .get(participant)
                    .ok_or(FlError::MissingShard { participant })?;
                Ok(nn::local_update(
                    w_t,
                    arch,
                    shard,
                    *lr,
                    *local_epochs,
                    *batch_size,
                    update_seed,
                )?)
            }
            GradientSource::FixedGaussian { sigma } => {
                if !(*sigma > 0.0) {
                    return Err(FlError::InvalidSigma);
                }
                Ok(gaussian_update(w_t.len(), *sigma, update_seed))
            }
            GradientSource::RecordedVariance { trace } => {
                let sigma = trace
                    .std_for(round, participant)
                    .ok_or(FlError::MissingTraceEntry { round, participant })?;
                if !(sigma > 0.0) {
                    return Err(FlError::InvalidSigma);
                }
                Ok(gaussian_update(w_t.len(), sigma, update_seed))
            }
        }
    }
}

fn gaussian_update(len: usize, sigma: f64, seed: u64) -> UpdateVec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    StandardNormal
        .sample_iter(&mut rng)
        .take(len)
        .map(|g: f64| sigma * g)
        .collect()
}

/// Sample standard deviation of a full update vector.
pub fn update_std(update: &[f64]) -> f64 {
    let n = update.len() as f64;
    let mean = update.iter().sum::<f64>() / n;
    (update.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_participation_selects_everyone() {
        let s = RoundSchedule::new(7, 1.0, SelectionPolicy::Random { seed: 1 }).unwrap();
        for round in 1..=5 {
            assert_eq!(select_participants(&s, round), (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn round_robin_cycles_blocks() {
        let s = RoundSchedule::new(4, 0.5, SelectionPolicy::RoundRobin).unwrap();
        assert_eq!(s.n_prime(), 2);
        assert_eq!(select_participants(&s, 1), vec![0, 1]);
        assert_eq!(select_participants(&s, 2), vec![2, 3]);
        assert_eq!(select_participants(&s, 3), vec![0, 1]);
    }

    #[test]
    fn round_robin_covers_cohort_like_one_full_round() {
        // Over n/n' consecutive rounds every id contributes exactly once.
        let s = RoundSchedule::new(12, 0.25, SelectionPolicy::RoundRobin).unwrap();
        let mut seen = Vec::new();
        for round in 1..=4 {
            seen.extend(select_participants(&s, round));
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn random_selection_is_deterministic_and_sized() {
        let s = RoundSchedule::new(10, 0.3, SelectionPolicy::Random { seed: 5 }).unwrap();
        assert_eq!(s.n_prime(), 3);
        for round in 1..=20 {
            let a = select_participants(&s, round);
            assert_eq!(a.len(), 3);
            assert_eq!(a, select_participants(&s, round));
            assert!(a.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn random_selection_frequencies_match_fraction() {
        // Expected count is fraction * rounds; a 10% band is ~4 sigma here.
        let s = RoundSchedule::new(10, 0.3, SelectionPolicy::Random { seed: 7 }).unwrap();
        let rounds = 4000;
        let mut counts = [0usize; 10];
        for round in 1..=rounds {
            for id in select_participants(&s, round) {
                counts[id] += 1;
            }
        }
        let expected = 0.3 * rounds as f64;
        for (id, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expected).abs() <= 0.1 * expected,
                "participant {id} selected {c} times, expected ~{expected}"
            );
        }
    }

    #[test]
    fn aggregate_arithmetic() {
        let cfg = AggregatorConfig::new(2.0, None).unwrap();
        let w = vec![10.0, 20.0];
        let updates = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(aggregate(&w, &updates, &cfg).unwrap(), vec![11.0, 21.0]);

        let cfg1 = AggregatorConfig::new(1.0, None).unwrap();
        let sym = vec![vec![1.0, -2.0], vec![-1.0, 2.0]];
        assert_eq!(aggregate(&w, &sym, &cfg1).unwrap(), w);

        // Single update: aggregate(W, {u}) - W = alpha * u.
        let one = vec![vec![0.5, -0.25]];
        let out = aggregate(&w, &one, &cfg).unwrap();
        assert_eq!(vec![out[0] - w[0], out[1] - w[1]], vec![1.0, -0.5]);

        assert!(matches!(
            aggregate(&w, &[], &cfg),
            Err(FlError::EmptyUpdateSet)
        ));
        assert!(matches!(
            aggregate(&w, &[vec![1.0]], &cfg),
            Err(FlError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn identical_updates_average_to_one() {
        let cfg = AggregatorConfig::new(1.0, None).unwrap();
        let w = vec![0.0; 4];
        let u = vec![0.5, -1.0, 2.0, 0.0];
        let updates = vec![u.clone(); 9];
        let out = aggregate(&w, &updates, &cfg).unwrap();
        for (o, v) in out.iter().zip(&u) {
            assert!((o - v).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_scales_and_preserves_direction() {
        let u = vec![1.2, 1.6]; // norm 2
        let clipped = clip_update(&u, 1.0);
        let norm: f64 = clipped.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((clipped[0] / u[0] - 0.5).abs() < 1e-12);
        assert!((clipped[1] / u[1] - 0.5).abs() < 1e-12);

        let small = vec![0.3, 0.0];
        assert_eq!(clip_update(&small, 0.5), small);

        // Cosine similarity stays exactly 1 for nonzero inputs.
        let dot: f64 = clipped.iter().zip(&u).map(|(a, b)| a * b).sum();
        let nu: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((dot / (norm * nu) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_gaussian_statistics() {
        let src = GradientSource::FixedGaussian { sigma: 1.0 };
        let w = vec![0.0; 1_000_000];
        let u = src.produce_update(3, &w, 1, 99).unwrap();
        let std = update_std(&u);
        assert!((0.998..=1.002).contains(&std), "std = {std}");
        let mean = u.iter().sum::<f64>() / u.len() as f64;
        assert!(mean.abs() <= 3.0 / (u.len() as f64).sqrt(), "mean = {mean}");
        // Distinct participants and rounds decorrelate.
        let v = src.produce_update(4, &w, 1, 99).unwrap();
        assert_ne!(u[..8], v[..8]);
        let w2 = src.produce_update(3, &w, 2, 99).unwrap();
        assert_ne!(u[..8], w2[..8]);
        assert_eq!(u, src.produce_update(3, &w, 1, 99).unwrap());
    }

    #[test]
    fn real_mode_delegates_to_local_update() {
        let arch = MlpArchitecture::new(vec![3, 4, 2]).unwrap();
        let data = nn::make_synthetic_dataset(2, 12, 3, 1).unwrap();
        let shards = nn::partition_non_iid(&data, 2, 1, 2).unwrap();
        let w = nn::init_model(&arch, 3);
        let src = GradientSource::Real {
            arch: arch.clone(),
            shards: shards.clone(),
            lr: 0.1,
            local_epochs: 1,
            batch_size: 4,
        };
        let from_source = src.produce_update(1, &w, 5, 77).unwrap();
        let update_seed = derive(77, &[stream::UPDATE, 5, 1]);
        let direct = nn::local_update(&w, &arch, &shards[1], 0.1, 1, 4, update_seed).unwrap();
        assert_eq!(from_source, direct);
        assert!(matches!(
            src.produce_update(9, &w, 5, 77),
            Err(FlError::MissingShard { participant: 9 })
        ));
    }

    #[test]
    fn recorded_trace_replays_and_round_trips() {
        let mut trace = VarianceTrace::default();
        trace.record(1, 0, 0.5);
        trace.record(1, 1, 2.0);
        trace.record(2, 0, 0.25);
        let csv = trace.to_csv();
        assert!(csv.starts_with("round,participant_id,std\n"));
        let parsed = VarianceTrace::from_csv(&csv).unwrap();
        assert_eq!(parsed, trace);

        let src = GradientSource::RecordedVariance { trace };
        let w = vec![0.0; 200_000];
        let u = src.produce_update(1, &w, 1, 11).unwrap();
        let std = update_std(&u);
        assert!((std - 2.0).abs() < 0.02, "std = {std}");
        assert!(matches!(
            src.produce_update(1, &w, 3, 11),
            Err(FlError::MissingTraceEntry { .. })
        ));
    }

    #[test]
    fn schedule_validation() {
        assert!(RoundSchedule::new(0, 1.0, SelectionPolicy::RoundRobin).is_err());
        assert!(RoundSchedule::new(10, 0.0, SelectionPolicy::RoundRobin).is_err());
        let s = RoundSchedule::new(10, 0.05, SelectionPolicy::RoundRobin).unwrap();
        assert_eq!(s.n_prime(), 1);
        assert!(AggregatorConfig::new(0.0, None).is_err());
        assert!(AggregatorConfig::new(1.0, Some(0.0)).is_err());
    }

    proptest! {
        #[test]
        fn prop_clipping_is_idempotent(
            u in proptest::collection::vec(-100.0f64..100.0, 1..32),
            max_norm in 0.1f64..10.0,
        ) {
            let once = clip_update(&u, max_norm);
            let twice = clip_update(&once, max_norm);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
            let norm: f64 = once.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm <= max_norm * (1.0 + 1e-12));
        }

        #[test]
        fn prop_single_update_linearity(
            w in proptest::collection::vec(-10.0f64..10.0, 4),
            u in proptest::collection::vec(-10.0f64..10.0, 4),
            alpha in 0.1f64..4.0,
        ) {
            let cfg = AggregatorConfig::new(alpha, None).unwrap();
            let out = aggregate(&w, std::slice::from_ref(&u), &cfg).unwrap();
            for i in 0..4 {
                prop_assert!((out[i] - w[i] - alpha * u[i]).abs() < 1e-9);
            }
        }
    }
}
