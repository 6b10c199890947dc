//! Direct-sequence spread-spectrum embedding into model updates.
//!
//! Every payload bit rides its own ±1 spreading code across `R` carrier
//! weights chosen by a shared-seed permutation. Embedding scales the whole
//! update by `β = √(1-δ²)` and adds `γ·C·b` on the carriers, with
//! `γ = δ·σ̂/√P` so the submitted update keeps the power of the original.
//! The receiver correlates the drift of the global model against each code
//! column and takes signs (or feeds the correlations to the LDPC decoder).
//!
//! Code columns are generated lazily from `(shared_seed, bit index)` by the
//! counter-based stream in [`crate::prng`]; the full `R x P` matrix is never
//! materialized, and both endpoints regenerate identical columns.

use crate::prng::{self, derive, stream};
use thiserror::Error;

/// Correlator outputs, one per frame bit.
pub type CorrelationVec = Vec<f64>;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("carrier count {r} exceeds parameter count {param_count}")]
    CarrierCountTooLarge { r: usize, param_count: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("frame length {frame} exceeds carrier count {r}")]
    FrameTooLong { frame: usize, r: usize },
    #[error("update has zero variance on the carriers; cannot set gains")]
    ZeroVarianceUpdate,
    #[error("stealth level delta must lie in (0, 1], got {delta}")]
    InvalidDelta { delta: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

/// Shared-seed carrier selection and spreading-code generator.
#[derive(Debug, Clone)]
pub struct SpreadingPlan {
    shared_seed: u64,
    param_count: usize,
    carrier_indices: Vec<usize>,
}

impl SpreadingPlan {
    /// Derives the plan from the shared secret. Carrier indices are the
    /// first `r` entries of a seeded permutation of all weight positions.
    pub fn build(shared_seed: u64, param_count: usize, r: usize) -> Result<Self, ChannelError> {
        if r > param_count {
            return Err(ChannelError::CarrierCountTooLarge { r, param_count });
        }
        if r == 0 {
            return Err(ChannelError::InvalidParameter(
                "carrier count must be positive",
            ));
        }
        let mut carrier_indices =
            prng::shuffled_indices(derive(shared_seed, &[stream::CARRIERS]), param_count);
        carrier_indices.truncate(r);
        Ok(Self {
            shared_seed,
            param_count,
            carrier_indices,
        })
    }

    pub fn carrier_count(&self) -> usize {
        self.carrier_indices.len()
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn carrier_indices(&self) -> &[usize] {
        &self.carrier_indices
    }

    /// Spreading code for payload bit `i`: `R` chips in {-1, +1}.
    pub fn code_column(&self, i: usize) -> Vec<i8> {
        prng::pm1_stream(
            derive(self.shared_seed, &[stream::CHIPS, i as u64]),
            self.carrier_indices.len(),
        )
    }
}

/// Stealth gains: `β² + δ² = 1` and `γ = δ·σ̂/√P`.
#[derive(Debug, Clone, Copy)]
pub struct GainParams {
    pub delta: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma_hat: f64,
}

impl GainParams {
    pub fn new(delta: f64, sigma_hat: f64, frame_bits: usize) -> Result<Self, ChannelError> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(ChannelError::InvalidDelta { delta });
        }
        if !(sigma_hat > 0.0) || frame_bits == 0 {
            return Err(ChannelError::InvalidParameter(
                "sigma_hat and frame length must be positive",
            ));
        }
        Ok(Self {
            delta,
            beta: (1.0 - delta * delta).sqrt(),
            gamma: delta * sigma_hat / (frame_bits as f64).sqrt(),
            sigma_hat,
        })
    }
}

/// Sample standard deviation of the update restricted to the carriers.
///
/// The sender calls this on its own raw update each transmitting round; the
/// estimate feeds `γ` so the payload power tracks the gradient power.
pub fn estimate_sigma(update: &[f64], plan: &SpreadingPlan) -> Result<f64, ChannelError> {
    if update.len() != plan.param_count {
        return Err(ChannelError::LengthMismatch {
            expected: plan.param_count,
            got: update.len(),
        });
    }
    let r = plan.carrier_count();
    let mean = plan.carrier_indices.iter().map(|&i| update[i]).sum::<f64>() / r as f64;
    let var = plan
        .carrier_indices
        .iter()
        .map(|&i| {
            let d = update[i] - mean;
            d * d
        })
        .sum::<f64>()
        / (r as f64 - 1.0).max(1.0);
    if var <= 0.0 {
        return Err(ChannelError::ZeroVarianceUpdate);
    }
    Ok(var.sqrt())
}

/// Embeds a ±1 frame into an update: all entries are attenuated by `β`, and
/// each carrier additionally receives `γ·(C·b)` from its chip row.
pub fn embed(
    update: &[f64],
    frame_bits: &[i8],
    gains: &GainParams,
    plan: &SpreadingPlan,
) -> Result<Vec<f64>, ChannelError> {
    if update.len() != plan.param_count {
        return Err(ChannelError::LengthMismatch {
            expected: plan.param_count,
            got: update.len(),
        });
    }
    if frame_bits.len() > plan.carrier_count() {
        return Err(ChannelError::FrameTooLong {
            frame: frame_bits.len(),
            r: plan.carrier_count(),
        });
    }
    let mut out: Vec<f64> = update.iter().map(|&w| gains.beta * w).collect();
    for (i, &bit) in frame_bits.iter().enumerate() {
        let col = plan.code_column(i);
        let scale = gains.gamma * f64::from(bit);
        for (&idx, &chip) in plan.carrier_indices.iter().zip(&col) {
            out[idx] += scale * f64::from(chip);
        }
    }
    Ok(out)
}

/// Correlates the model drift against the first `frame_bits` code columns:
/// `yᵢ = cᵢᵀ(W_T - W_0)` restricted to the carriers.
pub fn correlate(
    w_t: &[f64],
    w_0: &[f64],
    plan: &SpreadingPlan,
    frame_bits: usize,
) -> Result<CorrelationVec, ChannelError> {
    if w_t.len() != plan.param_count {
        return Err(ChannelError::LengthMismatch {
            expected: plan.param_count,
            got: w_t.len(),
        });
    }
    if w_0.len() != plan.param_count {
        return Err(ChannelError::LengthMismatch {
            expected: plan.param_count,
            got: w_0.len(),
        });
    }
    if frame_bits > plan.carrier_count() {
        return Err(ChannelError::FrameTooLong {
            frame: frame_bits,
            r: plan.carrier_count(),
        });
    }
    let diff: Vec<f64> = plan
        .carrier_indices
        .iter()
        .map(|&i| w_t[i] - w_0[i])
        .collect();
    Ok((0..frame_bits)
        .map(|i| {
            plan.code_column(i)
                .iter()
                .zip(&diff)
                .map(|(&chip, &d)| f64::from(chip) * d)
                .sum()
        })
        .collect())
}

/// Sign decision per correlator output; zero maps to +1.
pub fn hard_decision(y: &[f64]) -> Vec<i8> {
    y.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect()
}

/// Closed-form delivery-time and correlator-variance predictions.
#[derive(Debug, Clone, Copy)]
pub struct TheoryPrediction {
    /// Minimum global rounds to make the payload decodable:
    /// `n·P / (M²·δ²·(R-P))`.
    pub t_min: f64,
    n: f64,
    p: f64,
    r: f64,
    gamma: f64,
    sigma: f64,
    senders: f64,
}

impl TheoryPrediction {
    /// Variance of the normalized per-bit correlator after `t` rounds:
    /// `(P-1)/R + n·σ²/(M²·t·R·γ²)`.
    pub fn y_variance(&self, t: f64) -> f64 {
        (self.p - 1.0) / self.r
            + self.n * self.sigma * self.sigma
                / (self.senders * self.senders * t * self.r * self.gamma * self.gamma)
    }
}

/// Evaluates the delivery-time bound for a cohort of `n` participants,
/// frame length `p` spread over `r` carriers, `m` coherent senders at
/// stealth level `delta`, with per-round update deviation `sigma`.
pub fn predict(
    n: usize,
    p: usize,
    r: usize,
    delta: f64,
    m: usize,
    sigma: f64,
) -> Result<TheoryPrediction, ChannelError> {
    if r <= p {
        return Err(ChannelError::FrameTooLong { frame: p, r });
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(ChannelError::InvalidDelta { delta });
    }
    if n == 0 || p == 0 || m == 0 {
        return Err(ChannelError::InvalidParameter(
            "n, p and m must be positive",
        ));
    }
    if !(sigma > 0.0) {
        return Err(ChannelError::InvalidParameter("sigma must be positive"));
    }
    let (nf, pf, rf, mf) = (n as f64, p as f64, r as f64, m as f64);
    let gamma = delta * sigma / pf.sqrt();
    Ok(TheoryPrediction {
        t_min: nf * pf / (mf * mf * delta * delta * (rf - pf)),
        n: nf,
        p: pf,
        r: rf,
        gamma,
        sigma,
        senders: mf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, sigma: f64) -> Vec<f64> {
        (0..len)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    #[test]
    fn plan_is_deterministic_and_in_bounds() {
        let a = SpreadingPlan::build(42, 1000, 300).unwrap();
        let b = SpreadingPlan::build(42, 1000, 300).unwrap();
        assert_eq!(a.carrier_indices(), b.carrier_indices());
        assert_eq!(a.code_column(17), b.code_column(17));
        assert!(a.carrier_indices().iter().all(|&i| i < 1000));
        let mut sorted = a.carrier_indices().to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 300);
        assert!(SpreadingPlan::build(42, 100, 101).is_err());
    }

    #[test]
    fn full_carrier_plan_is_a_permutation() {
        let plan = SpreadingPlan::build(7, 128, 128).unwrap();
        let mut idx = plan.carrier_indices().to_vec();
        idx.sort_unstable();
        assert_eq!(idx, (0..128).collect::<Vec<_>>());
    }

    #[test]
    fn code_columns_are_balanced() {
        // Binomial bound: |sum| <= 4*sqrt(R) for at least 99% of columns.
        let r = 4096;
        let plan = SpreadingPlan::build(5, r, r).unwrap();
        let bound = 4.0 * (r as f64).sqrt();
        let ok = (0..500)
            .filter(|&i| {
                let s: i64 = plan.code_column(i).iter().map(|&c| i64::from(c)).sum();
                (s as f64).abs() <= bound
            })
            .count();
        assert!(ok >= 495, "balanced columns: {ok}/500");
    }

    #[test]
    fn sigma_estimate_matches_truth() {
        let r = 100_000;
        let plan = SpreadingPlan::build(3, r, r).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let update = gaussian_vec(&mut rng, r, 0.5);
        let est = estimate_sigma(&update, &plan).unwrap();
        assert!((0.495..=0.505).contains(&est), "est = {est}");
        // Homogeneity: scaling the update scales the estimate.
        let doubled: Vec<f64> = update.iter().map(|&v| 2.0 * v).collect();
        let est2 = estimate_sigma(&doubled, &plan).unwrap();
        assert!((est2 / est - 2.0).abs() < 1e-12);
        // Constant update is degenerate.
        assert!(matches!(
            estimate_sigma(&vec![1.0; r], &plan),
            Err(ChannelError::ZeroVarianceUpdate)
        ));
    }

    #[test]
    fn embed_matches_dense_matrix_oracle() {
        // delta = 1 zeroes the update; carriers must equal gamma*(C*b) exactly,
        // checked against an explicit dense multiply at R=64, P=8.
        let (r, p) = (64usize, 8usize);
        let plan = SpreadingPlan::build(77, r, r).unwrap();
        let gains = GainParams::new(1.0, 2.0, p).unwrap();
        assert!(gains.beta.abs() < 1e-12);
        let bits: Vec<i8> = vec![1, -1, -1, 1, 1, 1, -1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let update = gaussian_vec(&mut rng, r, 1.0);
        let embedded = embed(&update, &bits, &gains, &plan).unwrap();

        let mut dense = vec![vec![0f64; p]; r];
        for (i, col) in (0..p).map(|i| plan.code_column(i)).enumerate() {
            for (j, &chip) in col.iter().enumerate() {
                dense[j][i] = f64::from(chip);
            }
        }
        for (j, &carrier) in plan.carrier_indices().iter().enumerate() {
            let cb: f64 = (0..p).map(|i| dense[j][i] * f64::from(bits[i])).sum();
            assert!((embedded[carrier] - gains.gamma * cb).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gamma_passes_update_through_scaled() {
        let plan = SpreadingPlan::build(8, 256, 256).unwrap();
        let mut gains = GainParams::new(0.5, 1.0, 16).unwrap();
        gains.gamma = 0.0;
        let update: Vec<f64> = (0..256).map(|i| i as f64 / 17.0).collect();
        let bits = vec![1i8; 16];
        let out = embed(&update, &bits, &gains, &plan).unwrap();
        for (o, u) in out.iter().zip(&update) {
            assert!((o - gains.beta * u).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_preserves_update_power() {
        let r = 20_000;
        let p = 292;
        let plan = SpreadingPlan::build(9, r, r).unwrap();
        let bits: Vec<i8> = crate::prng::pm1_stream(1, p);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut rel_sum = 0.0;
        let trials = 100;
        for _ in 0..trials {
            let update = gaussian_vec(&mut rng, r, 1.0);
            let sigma = estimate_sigma(&update, &plan).unwrap();
            let gains = GainParams::new(0.5, sigma, p).unwrap();
            let embedded = embed(&update, &bits, &gains, &plan).unwrap();
            let n0: f64 = update.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n1: f64 = embedded.iter().map(|v| v * v).sum::<f64>().sqrt();
            rel_sum += (n1 / n0 - 1.0).abs();
        }
        let mean_rel = rel_sum / trials as f64;
        assert!(mean_rel <= 0.05, "mean relative power drift {mean_rel}");
    }

    #[test]
    fn correlate_recovers_single_bit_amplitude() {
        // One noiseless transmission of a single bit: y = gamma * R * b.
        let r = 64;
        let plan = SpreadingPlan::build(13, r, r).unwrap();
        let gains = GainParams::new(1.0, 1.0, 1).unwrap();
        let w0 = vec![0.25; r];
        let embedded = embed(&vec![0.0; r], &[-1], &gains, &plan).unwrap();
        let w_t: Vec<f64> = w0.iter().zip(&embedded).map(|(a, b)| a + b).collect();
        let y = correlate(&w_t, &w0, &plan, 1).unwrap();
        assert!((y[0] - -(gains.gamma * r as f64)).abs() < 1e-9);
    }

    #[test]
    fn correlate_is_zero_on_unchanged_model_and_linear() {
        let r = 512;
        let plan = SpreadingPlan::build(14, r, r).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w0 = gaussian_vec(&mut rng, r, 1.0);
        let y = correlate(&w0, &w0, &plan, 8).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));

        let u = gaussian_vec(&mut rng, r, 1.0);
        let v = gaussian_vec(&mut rng, r, 1.0);
        let add =
            |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
        let y_uv = correlate(&add(&add(&w0, &u), &v), &w0, &plan, 8).unwrap();
        let y_u = correlate(&add(&w0, &u), &w0, &plan, 8).unwrap();
        let y_v = correlate(&add(&w0, &v), &w0, &plan, 8).unwrap();
        for i in 0..8 {
            assert!((y_uv[i] - y_u[i] - y_v[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_round_trip_with_narrow_frame() {
        let (r, p) = (4096usize, 8usize);
        let plan = SpreadingPlan::build(16, r, r).unwrap();
        let gains = GainParams::new(1.0, 1.0, p).unwrap();
        let bits: Vec<i8> = vec![-1, 1, 1, -1, -1, -1, 1, -1];
        let w0 = vec![0.0; r];
        let embedded = embed(&w0, &bits, &gains, &plan).unwrap();
        let y = correlate(&embedded, &w0, &plan, p).unwrap();
        assert_eq!(hard_decision(&y), bits);
    }

    #[test]
    fn hard_decision_signs_and_tie_break() {
        assert_eq!(hard_decision(&[3.2, -0.1]), vec![1, -1]);
        assert_eq!(hard_decision(&[0.0]), vec![1]);
        let y = [0.4, -2.0, 1.0];
        let scaled: Vec<f64> = y.iter().map(|v| v * 7.5).collect();
        assert_eq!(hard_decision(&y), hard_decision(&scaled));
    }

    #[test]
    fn cross_correlation_statistics() {
        // c_i . c_i = R exactly; c_i . c_j over random plans has mean 0 and
        // variance close to R.
        let r = 1024usize;
        let mut dots = Vec::new();
        for seed in 0..300u64 {
            let plan = SpreadingPlan::build(seed, r, r).unwrap();
            let a = plan.code_column(0);
            let b = plan.code_column(1);
            let self_dot: i64 = a.iter().map(|&c| i64::from(c) * i64::from(c)).sum();
            assert_eq!(self_dot, r as i64);
            dots.push(
                a.iter()
                    .zip(&b)
                    .map(|(&x, &y)| f64::from(x) * f64::from(y))
                    .sum::<f64>(),
            );
        }
        let n = dots.len() as f64;
        let mean = dots.iter().sum::<f64>() / n;
        let var = dots.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 * (r as f64 / n).sqrt(), "mean = {mean}");
        assert!(
            (var / r as f64 - 1.0).abs() < 0.3,
            "var/R = {}",
            var / r as f64
        );
    }

    #[test]
    fn coherent_senders_scale_the_correlation() {
        // M identical embeddings aggregated at fixed cohort size give exactly
        // M times the single-sender correlation against the payload.
        let (r, p) = (2048usize, 16usize);
        let n = 8usize;
        let plan = SpreadingPlan::build(21, r, r).unwrap();
        let gains = GainParams::new(1.0, 1.0, p).unwrap();
        let bits: Vec<i8> = crate::prng::pm1_stream(2, p);
        let w0 = vec![0.0; r];
        let mean_aligned = |m: usize| -> f64 {
            let embedded = embed(&vec![0.0; r], &bits, &gains, &plan).unwrap();
            let mut agg = vec![0.0; r];
            for _ in 0..m {
                for (a, e) in agg.iter_mut().zip(&embedded) {
                    *a += e / n as f64;
                }
            }
            let w_t: Vec<f64> = w0.iter().zip(&agg).map(|(a, b)| a + b).collect();
            let y = correlate(&w_t, &w0, &plan, p).unwrap();
            y.iter()
                .zip(&bits)
                .map(|(&yi, &bi)| yi * f64::from(bi))
                .sum::<f64>()
                / p as f64
        };
        let one = mean_aligned(1);
        let four = mean_aligned(4);
        assert!((four / one - 4.0).abs() < 1e-9);
    }

    #[test]
    fn prediction_formulas() {
        let p1 = predict(100, 292, 22_270, 1.0, 1, 1.0).unwrap();
        assert!((p1.t_min - 1.3286).abs() < 0.01, "t_min = {}", p1.t_min);
        assert_eq!(p1.t_min.ceil() as u32, 2);

        let p2 = predict(100, 292, 22_270, 0.1, 1, 1.0).unwrap();
        assert!((p2.t_min - 132.86).abs() < 0.5, "t_min = {}", p2.t_min);

        let p4 = predict(100, 292, 22_270, 0.1, 2, 1.0).unwrap();
        assert!((p4.t_min / p2.t_min - 0.25).abs() < 1e-12);

        // Variance law at the fixed-Gaussian operating point.
        let v = p1.y_variance(2.0);
        let gamma: f64 = 1.0 / (292f64).sqrt();
        let expect = 291.0 / 22_270.0 + 100.0 / (2.0 * 22_270.0 * gamma * gamma);
        assert!((v - expect).abs() < 1e-12);

        assert!(predict(100, 300, 300, 1.0, 1, 1.0).is_err());
        assert!(predict(100, 292, 22_270, 0.0, 1, 1.0).is_err());
    }
}
