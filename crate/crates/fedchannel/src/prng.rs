//! Deterministic seed derivation and keyed ±1 chip streams.
//!
//! Sender and receiver never exchange key material beyond a single 64-bit
//! shared seed, so every derived artifact (carrier permutation, per-bit
//! spreading codes, pilot bits, code construction) must be reproducible from
//! that seed alone by two independent processes. This module pins the exact
//! derivation so it cannot drift with third-party RNG crates:
//!
//! - The base generator is SplitMix64 (Steele et al.): 64-bit state advanced
//!   by the golden-ratio constant, finalized with two xor-shift multiplies.
//! - `derive(base, tags)` absorbs each tag into the state and finalizes once
//!   per tag; distinct tag streams yield independent generators.
//! - ±1 chip streams unpack generator words LSB-first, bit set => +1.
//! - Bounded sampling uses modulo rejection, so permutations are unbiased.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream tags separating the independent uses of one seed.
pub mod stream {
    pub const CARRIERS: u64 = 0x01;
    pub const CHIPS: u64 = 0x02;
    pub const PILOTS: u64 = 0x03;
    pub const LDPC: u64 = 0x04;
    pub const SELECT: u64 = 0x05;
    pub const UPDATE: u64 = 0x06;
    pub const INIT: u64 = 0x07;
    pub const DATASET: u64 = 0x08;
    pub const PARTITION: u64 = 0x09;
    pub const LOCAL_SGD: u64 = 0x0A;
}

#[inline]
fn finalize(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        finalize(self.state)
    }

    /// Uniform draw in `[0, bound)` by modulo rejection; `bound` must be > 0.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % bound;
            }
        }
    }
}

/// Derives a sub-seed from `base` and an ordered list of tag words.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    let mut s = base;
    for &t in tags {
        s = finalize(s.wrapping_add(GOLDEN) ^ t.wrapping_mul(GOLDEN));
    }
    s
}

/// Keyed ±1 stream: `count` chips unpacked LSB-first from SplitMix64 words.
pub fn pm1_stream(seed: u64, count: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(count);
    let mut sm = SplitMix64::new(seed);
    while out.len() < count {
        let mut w = sm.next_u64();
        for _ in 0..64 {
            if out.len() == count {
                break;
            }
            out.push(if w & 1 == 1 { 1 } else { -1 });
            w >>= 1;
        }
    }
    out
}

/// Seeded Fisher-Yates permutation of `0..len`.
pub fn shuffled_indices(seed: u64, len: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    let mut sm = SplitMix64::new(seed);
    for i in (1..len).rev() {
        let j = sm.next_below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<u64> = {
            let mut g = SplitMix64::new(42);
            (0..16).map(|_| g.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut g = SplitMix64::new(42);
            (0..16).map(|_| g.next_u64()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn derive_separates_streams() {
        assert_ne!(
            derive(7, &[stream::CHIPS, 0]),
            derive(7, &[stream::CHIPS, 1])
        );
        assert_ne!(derive(7, &[stream::CHIPS]), derive(7, &[stream::PILOTS]));
        assert_ne!(derive(7, &[stream::CHIPS]), derive(8, &[stream::CHIPS]));
    }

    #[test]
    fn pm1_stream_is_balanced_and_pm1() {
        let chips = pm1_stream(derive(1, &[stream::CHIPS]), 100_000);
        assert!(chips.iter().all(|&c| c == 1 || c == -1));
        let sum: i64 = chips.iter().map(|&c| c as i64).sum();
        // 4-sigma bound on a length-1e5 random walk.
        assert!(sum.abs() < 4 * (100_000f64).sqrt() as i64, "sum = {sum}");
    }

    #[test]
    fn next_below_stays_in_bounds() {
        let mut sm = SplitMix64::new(9);
        for bound in [1u64, 2, 3, 10, 1000] {
            for _ in 0..200 {
                assert!(sm.next_below(bound) < bound);
            }
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let perm = shuffled_indices(5, 257);
        let mut seen = vec![false; 257];
        for &i in &perm {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(perm, shuffled_indices(5, 257));
        assert_ne!(perm, shuffled_indices(6, 257));
    }
}
