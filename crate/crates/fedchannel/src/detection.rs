//! The observer's toolkit: two-sample Kolmogorov-Smirnov test and
//! update-norm analysis over a round's submitted updates.
//!
//! The KS p-value uses the asymptotic Kolmogorov distribution with the
//! standard effective-size correction; at the sample sizes seen here
//! (thousands of weights per update) the asymptotic form is accurate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("samples need at least {min} points, got {got}")]
    UndersizedSample { got: usize, min: usize },
}

/// Minimum sample size accepted by [`ks_two_sample`].
pub const MIN_KS_SAMPLE: usize = 8;

/// Two-sample KS outcome.
#[derive(Debug, Clone, Copy)]
pub struct KsResult {
    /// Supremum gap between the two empirical CDFs, in [0, 1].
    pub d_statistic: f64,
    /// Asymptotic probability of a gap at least this large under the null.
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
}

/// Survival function of the Kolmogorov distribution,
/// `Q(λ) = 2·Σ_{j>=1} (-1)^{j-1} exp(-2 j² λ²)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let a2 = -2.0 * lambda * lambda;
    let mut sign = 1.0;
    let mut sum = 0.0;
    let mut prev_term = 0.0f64;
    for j in 1..=100 {
        let term = sign * (a2 * (j * j) as f64).exp();
        sum += term;
        if term.abs() <= 1e-12 * prev_term.abs() || term.abs() <= 1e-16 * sum.abs() {
            return (2.0 * sum).clamp(0.0, 1.0);
        }
        prev_term = term;
        sign = -sign;
    }
    // No convergence at tiny lambda: the gap is insignificant.
    1.0
}

/// Exact D via a merged sorted sweep, p-value via the asymptotic series with
/// effective size `n_e = n1 n2/(n1+n2)` and the usual small-sample correction
/// `λ = (√n_e + 0.12 + 0.11/√n_e)·D`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, DetectError> {
    for s in [a, b] {
        if s.len() < MIN_KS_SAMPLE {
            return Err(DetectError::UndersizedSample {
                got: s.len(),
                min: MIN_KS_SAMPLE,
            });
        }
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_unstable_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_unstable_by(|p, q| p.partial_cmp(q).unwrap());

    let (n1, n2) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < n1 || j < n2 {
        // Advance past every tie of the next value in both samples before
        // evaluating the gap.
        let v = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < n1 && xs[i] == v {
            i += 1;
        }
        while j < n2 && ys[j] == v {
            j += 1;
        }
        let gap = (i as f64 / n1 as f64 - j as f64 / n2 as f64).abs();
        d = d.max(gap);
    }

    let ne = (n1 as f64 * n2 as f64) / (n1 + n2) as f64;
    let sqrt_ne = ne.sqrt();
    let lambda = (sqrt_ne + 0.12 + 0.11 / sqrt_ne) * d;
    Ok(KsResult {
        d_statistic: d,
        p_value: kolmogorov_q(lambda),
        n1,
        n2,
    })
}

/// Frobenius norm of an update — the flat-vector l2 norm.
pub fn frobenius_norm(update: &[f64]) -> f64 {
    update.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One row of the per-round norm report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRow {
    pub round: u32,
    pub participant: usize,
    pub norm: f64,
    /// Deviation from the cohort mean in cohort standard deviations;
    /// zero when the cohort has no spread.
    pub z_score: f64,
}

/// Per-round cohort norm statistics: each participant's norm and its
/// z-score against the whole cohort of submitted updates.
pub fn norm_report(round: u32, updates: &[(usize, &[f64])]) -> Vec<NormRow> {
    let norms: Vec<f64> = updates.iter().map(|(_, u)| frobenius_norm(u)).collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n.max(1.0);
    let var = if norms.len() > 1 {
        norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let std = var.sqrt();
    updates
        .iter()
        .zip(&norms)
        .map(|(&(participant, _), &norm)| NormRow {
            round,
            participant,
            norm,
            z_score: if std > 0.0 { (norm - mean) / std } else { 0.0 },
        })
        .collect()
}
