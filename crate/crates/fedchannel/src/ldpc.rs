//! Rate-1/2 LDPC codes over GF(2) with sum-product decoding.
//!
//! A code for a `k`-bit message has codeword length `p = 2k` and a sparse
//! parity-check matrix `H` of `p - k` rows. Construction places three ones
//! per codeword bit (column weight 3, row weight 6 at rate 1/2), drawn from
//! a seeded slot model so both endpoints of the channel can rebuild the same
//! code from a shared seed. Short cycles are avoided where the size permits,
//! and construction retries until `H` has full row rank.
//!
//! The generator is in systematic-equivalent form: GF(2) elimination with
//! column pivoting yields `G` with `G·Hᵀ = 0`; message bits occupy the
//! recorded non-pivot positions of the codeword and are read back from there
//! after decoding.
//!
//! LLR convention: positive log-likelihood ratio means bit 0 is more likely
//! (bit 0 maps to +1 on the channel, bit 1 to -1). This is the single place
//! the convention is defined; framing relies on it.

use crate::prng::{derive, SplitMix64};
use thiserror::Error;

/// Per-bit log-likelihood ratios, length `p`, positive = bit 0.
pub type LlrVec = Vec<f64>;

/// Magnitude bound applied to channel LLRs and check messages.
pub const LLR_CAP: f64 = 40.0;
/// Default belief-propagation iteration cap.
pub const DEFAULT_MAX_ITERS: usize = 50;
/// Minimum pilot count accepted by [`llr_from_correlation`].
pub const MIN_PILOTS: usize = 16;

const CONSTRUCT_ATTEMPTS: u32 = 64;
const COLUMN_SWAP_TRIES: usize = 400;
const CANDIDATE_POOL: u32 = 24;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("message length must be at least 8 bits, got {k}")]
    MessageTooShort { k: usize },
    #[error("no full-rank parity matrix found for k={k} after {attempts} attempts (seed {seed})")]
    ConstructionFailed { k: usize, seed: u64, attempts: u32 },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("need at least {min} pilot bits, got {got}")]
    TooFewPilots { got: usize, min: usize },
    #[error("pilot amplitude estimate {a_hat} is not positive; signal below noise")]
    SignalBelowNoise { a_hat: f64 },
}

/// A rate-1/2 binary LDPC code.
#[derive(Debug, Clone)]
pub struct LdpcCode {
    k: usize,
    p: usize,
    /// Check adjacency: bit positions of each parity row, sorted.
    rows: Vec<Vec<usize>>,
    /// Generator rows as bitsets of width `p`, one per message bit.
    gen_rows: Vec<Vec<u64>>,
    /// Codeword positions holding the message bits (non-pivot columns).
    free_cols: Vec<usize>,
}

/// Result of a belief-propagation decode.
#[derive(Debug, Clone)]
pub struct BpDecode {
    /// Message bits read from the decided codeword.
    pub message: Vec<u8>,
    /// Full decided codeword.
    pub codeword: Vec<u8>,
    /// True iff the decision satisfies every parity check.
    pub converged: bool,
    /// Message-passing rounds completed before stopping.
    pub iterations: usize,
}

impl LdpcCode {
    /// Builds the code for `k` message bits, deterministically per seed.
    ///
    /// Several full-rank candidates are drawn and the one with the fewest
    /// short Tanner cycles wins (4-cycles first, then 6-cycles); girth 8 is
    /// out of reach at these sizes, so the 6-cycle count is what spreads
    /// decoder performance between random draws.
    pub fn construct(k: usize, seed: u64) -> Result<Self, CodecError> {
        if k < 8 {
            return Err(CodecError::MessageTooShort { k });
        }
        let p = 2 * k;
        let mut best: Option<((usize, usize), Self)> = None;
        let mut found = 0u32;
        for attempt in 0..CONSTRUCT_ATTEMPTS {
            // First half of the budget insists on girth >= 6; small codes
            // cannot avoid 4-cycles, so later attempts relax that.
            let strict = attempt < CONSTRUCT_ATTEMPTS / 2;
            let sub = derive(seed, &[crate::prng::stream::LDPC, attempt as u64]);
            let Some(rows) = place_ones(p, k, sub, strict) else {
                continue;
            };
            if let Some((gen_rows, free_cols)) = derive_generator(&rows, p, k) {
                let score = cycle_scores(&rows, p);
                let code = Self {
                    k,
                    p,
                    rows,
                    gen_rows,
                    free_cols,
                };
                debug_assert!(code.generator_annihilates_parity());
                if best.as_ref().map(|(s, _)| score < *s).unwrap_or(true) {
                    best = Some((score, code));
                }
                found += 1;
                if found >= CANDIDATE_POOL {
                    break;
                }
            }
        }
        best.map(|(_, code)| code)
            .ok_or(CodecError::ConstructionFailed {
                k,
                seed,
                attempts: CONSTRUCT_ATTEMPTS,
            })
    }

    pub fn message_len(&self) -> usize {
        self.k
    }

    pub fn codeword_len(&self) -> usize {
        self.p
    }

    /// Parity rows as sorted bit-position lists.
    pub fn parity_rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    /// Codeword positions that carry the message bits.
    pub fn message_positions(&self) -> &[usize] {
        &self.free_cols
    }

    /// Sparse `H` as `row,col` CSV lines, for external verification.
    pub fn parity_pairs_csv(&self) -> String {
        let mut out = String::from("row,col\n");
        for (r, row) in self.rows.iter().enumerate() {
            for &c in row {
                out.push_str(&format!("{r},{c}\n"));
            }
        }
        out
    }

    /// Systematic-equivalent encoding: `b = m·G (mod 2)`.
    pub fn encode(&self, message: &[u8]) -> Result<Vec<u8>, CodecError> {
        if message.len() != self.k {
            return Err(CodecError::LengthMismatch {
                expected: self.k,
                got: message.len(),
            });
        }
        let words = self.p.div_ceil(64);
        let mut acc = vec![0u64; words];
        for (bit, row) in message.iter().zip(&self.gen_rows) {
            if *bit & 1 == 1 {
                for (a, w) in acc.iter_mut().zip(row) {
                    *a ^= w;
                }
            }
        }
        Ok((0..self.p)
            .map(|i| ((acc[i / 64] >> (i % 64)) & 1) as u8)
            .collect())
    }

    /// `s = word·Hᵀ (mod 2)`; all-zero iff `word` is a codeword.
    pub fn syndrome(&self, word: &[u8]) -> Result<Vec<u8>, CodecError> {
        if word.len() != self.p {
            return Err(CodecError::LengthMismatch {
                expected: self.p,
                got: word.len(),
            });
        }
        Ok(self
            .rows
            .iter()
            .map(|row| row.iter().fold(0u8, |s, &c| s ^ (word[c] & 1)))
            .collect())
    }

    pub fn is_codeword(&self, word: &[u8]) -> bool {
        self.syndrome(word)
            .map(|s| s.iter().all(|&b| b == 0))
            .unwrap_or(false)
    }

    /// Reads the message bits out of a decided codeword.
    pub fn message_from_codeword(&self, codeword: &[u8]) -> Vec<u8> {
        self.free_cols.iter().map(|&c| codeword[c] & 1).collect()
    }

    /// Flooding sum-product decoding on the Tanner graph of `H`.
    ///
    /// Stops as soon as the running hard decision satisfies all checks;
    /// non-convergence within `max_iters` is reported via the flag, not an
    /// error.
    pub fn bp_decode(&self, llr: &[f64], max_iters: usize) -> Result<BpDecode, CodecError> {
        if llr.len() != self.p {
            return Err(CodecError::LengthMismatch {
                expected: self.p,
                got: llr.len(),
            });
        }
        let channel: Vec<f64> = llr.iter().map(|&l| l.clamp(-LLR_CAP, LLR_CAP)).collect();
        let mut totals = channel.clone();
        let mut decision: Vec<u8> = totals
            .iter()
            .map(|&t| if t >= 0.0 { 0 } else { 1 })
            .collect();
        if self.is_codeword(&decision) {
            let message = self.message_from_codeword(&decision);
            return Ok(BpDecode {
                message,
                codeword: decision,
                converged: true,
                iterations: 0,
            });
        }

        let mut c2v: Vec<Vec<f64>> = self.rows.iter().map(|r| vec![0.0; r.len()]).collect();
        let mut tanh_buf: Vec<f64> = Vec::new();
        for it in 1..=max_iters.max(1) {
            for (r, row) in self.rows.iter().enumerate() {
                tanh_buf.clear();
                tanh_buf.extend(row.iter().zip(&c2v[r]).map(|(&v, &m)| {
                    ((totals[v] - m) / 2.0)
                        .tanh()
                        .clamp(-(1.0 - 1e-15), 1.0 - 1e-15)
                }));
                // Leave-one-out products via prefix/suffix scans.
                let d = row.len();
                let mut suffix = vec![1.0; d + 1];
                for i in (0..d).rev() {
                    suffix[i] = suffix[i + 1] * tanh_buf[i];
                }
                let mut prefix = 1.0;
                for i in 0..d {
                    let excl = prefix * suffix[i + 1];
                    c2v[r][i] = (2.0 * excl.atanh()).clamp(-LLR_CAP, LLR_CAP);
                    prefix *= tanh_buf[i];
                }
            }
            totals.copy_from_slice(&channel);
            for (r, row) in self.rows.iter().enumerate() {
                for (i, &v) in row.iter().enumerate() {
                    totals[v] += c2v[r][i];
                }
            }
            for (d, &t) in decision.iter_mut().zip(&totals) {
                *d = if t >= 0.0 { 0 } else { 1 };
            }
            if self.is_codeword(&decision) {
                let message = self.message_from_codeword(&decision);
                return Ok(BpDecode {
                    message,
                    codeword: decision,
                    converged: true,
                    iterations: it,
                });
            }
        }
        let message = self.message_from_codeword(&decision);
        Ok(BpDecode {
            message,
            codeword: decision,
            converged: false,
            iterations: max_iters,
        })
    }

    fn generator_annihilates_parity(&self) -> bool {
        self.gen_rows.iter().all(|g| {
            self.rows.iter().all(|row| {
                row.iter()
                    .fold(0u64, |s, &c| s ^ ((g[c / 64] >> (c % 64)) & 1))
                    == 0
            })
        })
    }
}

/// Draws the parity-check support: three distinct rows per column, row
/// degrees exactly balanced, optionally rejecting any pair of rows shared by
/// two columns (which would close a 4-cycle).
fn place_ones(p: usize, k: usize, seed: u64, strict: bool) -> Option<Vec<Vec<usize>>> {
    let n_rows = p - k;
    let total = 3 * p;
    let mut sm = SplitMix64::new(seed);

    // Slot model: each row appears `total / n_rows` times (+1 for the first
    // `total % n_rows` rows), giving exact or near-exact row regularity.
    let base = total / n_rows;
    let extra = total % n_rows;
    let mut slots: Vec<usize> = Vec::with_capacity(total);
    for r in 0..n_rows {
        let reps = base + usize::from(r < extra);
        slots.extend(std::iter::repeat_n(r, reps));
    }
    for i in (1..slots.len()).rev() {
        let j = sm.next_below(i as u64 + 1) as usize;
        slots.swap(i, j);
    }

    let mut used_pairs = vec![false; n_rows * n_rows];
    let pair_key = |a: usize, b: usize| a.min(b) * n_rows + a.max(b);
    let mut rows: Vec<Vec<usize>> = vec![Vec::with_capacity(8); n_rows];
    let mut swap_budget = COLUMN_SWAP_TRIES * p;

    for col in 0..p {
        let start = 3 * col;
        for j in 0..3 {
            loop {
                let cand = slots[start + j];
                let chosen = &slots[start..start + j];
                let distinct = !chosen.contains(&cand);
                let no_cycle = !strict || chosen.iter().all(|&c| !used_pairs[pair_key(cand, c)]);
                if distinct && no_cycle {
                    break;
                }
                if swap_budget == 0 || start + j + 1 >= slots.len() {
                    return None;
                }
                swap_budget -= 1;
                let len_left = (slots.len() - (start + j + 1)) as u64;
                let other = start + j + 1 + sm.next_below(len_left) as usize;
                slots.swap(start + j, other);
            }
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                used_pairs[pair_key(slots[start + a], slots[start + b])] = true;
            }
        }
        for j in 0..3 {
            rows[slots[start + j]].push(col);
        }
    }
    for row in &mut rows {
        row.sort_unstable();
    }
    Some(rows)
}

/// Short-cycle census of the Tanner graph, the candidate ranking key:
/// 4-cycles (row pairs shared by two columns) dominate, then 6-cycles
/// (triangles in the check-adjacency graph with three distinct columns).
fn cycle_scores(rows: &[Vec<usize>], p: usize) -> (usize, usize) {
    use std::collections::HashMap;
    let n_rows = rows.len();
    let mut col_rows: Vec<Vec<u32>> = vec![Vec::with_capacity(3); p];
    for (r, row) in rows.iter().enumerate() {
        for &c in row {
            col_rows[c].push(r as u32);
        }
    }
    let mut edges: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
    for (c, rs) in col_rows.iter().enumerate() {
        for i in 0..rs.len() {
            for j in (i + 1)..rs.len() {
                let key = (rs[i].min(rs[j]), rs[i].max(rs[j]));
                edges.entry(key).or_default().push(c as u32);
            }
        }
    }
    let four_cycles: usize = edges
        .values()
        .map(|cols| cols.len() * (cols.len() - 1) / 2)
        .sum();
    let mut adj: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n_rows];
    for (&(r, s), cols) in &edges {
        for &c in cols {
            adj[r as usize].push((s, c));
            adj[s as usize].push((r, c));
        }
    }
    let mut count = 0usize;
    for (&(r, s), cols) in &edges {
        for &c in cols {
            for &(t1, c1) in &adj[r as usize] {
                if t1 == s || c1 == c {
                    continue;
                }
                for &(t2, c2) in &adj[s as usize] {
                    if t2 == t1 && c2 != c && c2 != c1 {
                        count += 1;
                    }
                }
            }
        }
    }
    // Each 6-cycle is reached from each of its three base edges.
    (four_cycles, count / 3)
}

/// GF(2) Gaussian elimination of `H` into reduced row-echelon form. Returns
/// the generator bit-rows and the free (message) columns, or `None` when `H`
/// is rank deficient.
fn derive_generator(
    rows: &[Vec<usize>],
    p: usize,
    k: usize,
) -> Option<(Vec<Vec<u64>>, Vec<usize>)> {
    let n_rows = p - k;
    let words = p.div_ceil(64);
    let mut h: Vec<Vec<u64>> = rows
        .iter()
        .map(|row| {
            let mut bits = vec![0u64; words];
            for &c in row {
                bits[c / 64] |= 1 << (c % 64);
            }
            bits
        })
        .collect();

    let bit = |m: &[Vec<u64>], r: usize, c: usize| (m[r][c / 64] >> (c % 64)) & 1 == 1;
    let mut pivot_cols = Vec::with_capacity(n_rows);
    let mut rank = 0usize;
    for col in 0..p {
        let Some(src) = (rank..n_rows).find(|&r| bit(&h, r, col)) else {
            continue;
        };
        h.swap(rank, src);
        let pivot_row = h[rank].clone();
        for (r, row) in h.iter_mut().enumerate() {
            if r != rank && (row[col / 64] >> (col % 64)) & 1 == 1 {
                for (w, pw) in row.iter_mut().zip(&pivot_row) {
                    *w ^= pw;
                }
            }
        }
        pivot_cols.push(col);
        rank += 1;
        if rank == n_rows {
            break;
        }
    }
    if rank < n_rows {
        return None;
    }

    let pivot_set: Vec<bool> = {
        let mut s = vec![false; p];
        for &c in &pivot_cols {
            s[c] = true;
        }
        s
    };
    let free_cols: Vec<usize> = (0..p).filter(|&c| !pivot_set[c]).collect();
    debug_assert_eq!(free_cols.len(), k);

    // Basis codeword per free column f: x[f] = 1, x[pivot r] = H_rref[r][f].
    let gen_rows: Vec<Vec<u64>> = free_cols
        .iter()
        .map(|&f| {
            let mut g = vec![0u64; words];
            g[f / 64] |= 1 << (f % 64);
            for (r, &pc) in pivot_cols.iter().enumerate() {
                if bit(&h, r, f) {
                    g[pc / 64] |= 1 << (pc % 64);
                }
            }
            g
        })
        .collect();
    Some((gen_rows, free_cols))
}

/// Channel-estimate LLRs from correlator outputs using the known pilots.
///
/// The pilot segment estimates the signal amplitude `Â` (mean of pilot
/// correlations times pilot signs) and the residual noise variance `v̂`;
/// data LLRs are then `2·Â·yᵢ/v̂`, clamped to [`LLR_CAP`]. A non-positive
/// `Â` means the payload has not yet risen above the aggregate noise.
pub fn llr_from_correlation(
    y_data: &[f64],
    y_pilots: &[f64],
    pilot_bits: &[i8],
) -> Result<LlrVec, CodecError> {
    if y_pilots.len() != pilot_bits.len() {
        return Err(CodecError::LengthMismatch {
            expected: pilot_bits.len(),
            got: y_pilots.len(),
        });
    }
    if y_pilots.len() < MIN_PILOTS {
        return Err(CodecError::TooFewPilots {
            got: y_pilots.len(),
            min: MIN_PILOTS,
        });
    }
    let n = y_pilots.len() as f64;
    let a_hat = y_pilots
        .iter()
        .zip(pilot_bits)
        .map(|(&y, &b)| y * f64::from(b))
        .sum::<f64>()
        / n;
    if a_hat <= 0.0 {
        return Err(CodecError::SignalBelowNoise { a_hat });
    }
    let v_hat = y_pilots
        .iter()
        .zip(pilot_bits)
        .map(|(&y, &b)| {
            let r = y - a_hat * f64::from(b);
            r * r
        })
        .sum::<f64>()
        / (n - 1.0);
    let llr = if v_hat <= f64::EPSILON * a_hat * a_hat {
        // Degenerate noiseless pilots: saturate on sign alone.
        y_data
            .iter()
            .map(|&y| if y >= 0.0 { LLR_CAP } else { -LLR_CAP })
            .collect()
    } else {
        y_data
            .iter()
            .map(|&y| (2.0 * a_hat * y / v_hat).clamp(-LLR_CAP, LLR_CAP))
            .collect()
    };
    Ok(llr)
}
