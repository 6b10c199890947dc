//! Payload framing: bytes -> LDPC codeword -> ±1 frame with pilot tail.
//!
//! A payload of `P_msg` bits is encoded by a rate-1/2 code into `2·P_msg`
//! codeword bits, mapped 0 -> +1 and 1 -> -1, and extended with 100 known
//! pilot bits derived from the shared pilot seed. The pilots ride the same
//! spreading channel as the data and let the receiver estimate signal
//! amplitude and noise variance before decoding.

use crate::cdma::CorrelationVec;
use crate::ldpc::{self, LdpcCode};
use crate::prng::{self, derive, stream};
use thiserror::Error;

/// Pilot bits appended to every frame.
pub const PILOT_LEN: usize = 100;

#[derive(Debug, Error)]
pub enum FramingError {
    #[error("payload must be nonempty")]
    EmptyPayload,
    #[error("code is sized for {code_bits} message bits but payload has {payload_bits}")]
    CodeSizeMismatch {
        code_bits: usize,
        payload_bits: usize,
    },
    #[error("correlation vector has {got} entries, frame expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Codec(#[from] ldpc::CodecError),
}

/// The covert message as raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    bytes: Vec<u8>,
}

impl Payload {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, FramingError> {
        if bytes.is_empty() {
            return Err(FramingError::EmptyPayload);
        }
        Ok(Self { bytes })
    }

    pub fn from_text(text: &str) -> Result<Self, FramingError> {
        Self::from_bytes(text.as_bytes().to_vec())
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Message length in bits.
    pub fn bit_len(&self) -> usize {
        8 * self.bytes.len()
    }

    /// MSB-first bit expansion.
    pub fn bits(&self) -> Vec<u8> {
        self.bytes
            .iter()
            .flat_map(|&b| (0..8).rev().map(move |i| (b >> i) & 1))
            .collect()
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self, FramingError> {
        let bytes: Vec<u8> = bits
            .chunks(8)
            .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | (b & 1)))
            .collect();
        Self::from_bytes(bytes)
    }
}

/// The transmitted ±1 frame: `[codeword | pilots]`, length `2·P_msg + 100`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    bits: Vec<i8>,
    p_msg: usize,
}

impl Frame {
    pub fn bits(&self) -> &[i8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn message_bits(&self) -> usize {
        self.p_msg
    }

    pub fn codeword_len(&self) -> usize {
        2 * self.p_msg
    }

    pub fn data_segment(&self) -> &[i8] {
        &self.bits[..self.codeword_len()]
    }

    pub fn pilot_segment(&self) -> &[i8] {
        &self.bits[self.codeword_len()..]
    }
}

/// Deterministic pilot bits for a pilot seed.
pub fn pilot_bits(pilot_seed: u64) -> Vec<i8> {
    prng::pm1_stream(derive(pilot_seed, &[stream::PILOTS]), PILOT_LEN)
}

/// Encodes a payload into the transmitted frame.
pub fn frame(payload: &Payload, code: &LdpcCode, pilot_seed: u64) -> Result<Frame, FramingError> {
    if code.message_len() != payload.bit_len() {
        return Err(FramingError::CodeSizeMismatch {
            code_bits: code.message_len(),
            payload_bits: payload.bit_len(),
        });
    }
    let codeword = code.encode(&payload.bits())?;
    let mut bits: Vec<i8> = codeword
        .iter()
        .map(|&b| if b == 0 { 1 } else { -1 })
        .collect();
    bits.extend(pilot_bits(pilot_seed));
    Ok(Frame {
        bits,
        p_msg: payload.bit_len(),
    })
}

/// Receiver-side outcome of a decode attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeframeOutcome {
    /// Belief propagation converged to a zero-syndrome codeword.
    Decoded(Payload),
    /// Pilot amplitude estimate not yet positive; signal below noise.
    NotYetDecodable,
    /// Amplitude positive but decoding did not converge this round.
    NotConverged,
}

/// Attempts to decode a correlation vector back into the payload.
///
/// When the true frame is supplied by the harness, the pre-FEC bit error
/// rate of the hard-decided data segment is reported alongside.
pub fn deframe(
    y: &CorrelationVec,
    code: &LdpcCode,
    pilot_seed: u64,
    truth: Option<&Frame>,
) -> Result<(DeframeOutcome, Option<f64>), FramingError> {
    let expected = code.codeword_len() + PILOT_LEN;
    if y.len() != expected {
        return Err(FramingError::LengthMismatch {
            expected,
            got: y.len(),
        });
    }
    let (y_data, y_pilots) = y.split_at(code.codeword_len());
    let pre_fec =
        truth.map(|t| bit_error_rate(&crate::cdma::hard_decision(y_data), t.data_segment()));

    let pilots = pilot_bits(pilot_seed);
    let llr = match ldpc::llr_from_correlation(y_data, y_pilots, &pilots) {
        Ok(llr) => llr,
        Err(ldpc::CodecError::SignalBelowNoise { .. }) => {
            return Ok((DeframeOutcome::NotYetDecodable, pre_fec));
        }
        Err(e) => return Err(e.into()),
    };
    let decode = code.bp_decode(&llr, ldpc::DEFAULT_MAX_ITERS)?;
    if !decode.converged {
        return Ok((DeframeOutcome::NotConverged, pre_fec));
    }
    let payload = Payload::from_bits(&decode.message)?;
    Ok((DeframeOutcome::Decoded(payload), pre_fec))
}

/// Hamming distance over length, in [0, 1].
pub fn bit_error_rate(decoded: &[i8], truth: &[i8]) -> f64 {
    assert_eq!(
        decoded.len(),
        truth.len(),
        "bit sequences must have equal length"
    );
    let errs = decoded.iter().zip(truth).filter(|(a, b)| a != b).count();
    errs as f64 / decoded.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn code_for(payload: &Payload) -> LdpcCode {
        LdpcCode::construct(payload.bit_len(), 1234).unwrap()
    }

    #[test]
    fn frame_lengths_match_payload_arithmetic() {
        let hello = Payload::from_text("hello world!").unwrap();
        assert_eq!(hello.bit_len(), 96);
        let f = frame(&hello, &code_for(&hello), 9).unwrap();
        assert_eq!(f.len(), 292);

        let answer = Payload::from_text("The answer is 42!").unwrap();
        assert_eq!(answer.bit_len(), 136);
        let f = frame(&answer, &code_for(&answer), 9).unwrap();
        assert_eq!(f.len(), 372);
    }

    #[test]
    fn code_size_mismatch_is_rejected() {
        let hello = Payload::from_text("hello world!").unwrap();
        let wrong = LdpcCode::construct(64, 1).unwrap();
        assert!(matches!(
            frame(&hello, &wrong, 9),
            Err(FramingError::CodeSizeMismatch { .. })
        ));
        assert!(Payload::from_text("").is_err());
    }

    #[test]
    fn clean_round_trip_at_any_positive_scale() {
        let payload = Payload::from_text("hello world!").unwrap();
        let code = code_for(&payload);
        let f = frame(&payload, &code, 77).unwrap();
        for scale in [1e-3, 0.5, 1.0, 42.0] {
            let y: Vec<f64> = f.bits().iter().map(|&b| scale * f64::from(b)).collect();
            let (outcome, pre_fec) = deframe(&y, &code, 77, Some(&f)).unwrap();
            assert_eq!(
                outcome,
                DeframeOutcome::Decoded(payload.clone()),
                "scale {scale}"
            );
            assert_eq!(pre_fec, Some(0.0));
        }
    }

    #[test]
    fn pure_noise_rarely_decodes() {
        let payload = Payload::from_text("hello world!").unwrap();
        let code = code_for(&payload);
        let f = frame(&payload, &code, 77).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut undecoded = 0;
        let trials = 100;
        for _ in 0..trials {
            let y: Vec<f64> = (0..f.len())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            match deframe(&y, &code, 77, None).unwrap().0 {
                DeframeOutcome::NotYetDecodable | DeframeOutcome::NotConverged => undecoded += 1,
                DeframeOutcome::Decoded(_) => {}
            }
        }
        assert!(
            undecoded >= 99,
            "noise produced {} decodes",
            trials - undecoded
        );
    }

    #[test]
    fn bit_error_rate_extremes() {
        let a = vec![1i8, -1, 1, 1];
        assert_eq!(bit_error_rate(&a, &a), 0.0);
        let complement: Vec<i8> = a.iter().map(|&b| -b).collect();
        assert_eq!(bit_error_rate(&a, &complement), 1.0);
        let mut one_flip = vec![1i8; 292];
        one_flip[17] = -1;
        let truth = vec![1i8; 292];
        assert!((bit_error_rate(&one_flip, &truth) - 1.0 / 292.0).abs() < 1e-15);
    }

    #[test]
    fn payload_bits_round_trip() {
        let p = Payload::from_bytes(vec![0xA5, 0x01, 0xFF]).unwrap();
        assert_eq!(Payload::from_bits(&p.bits()).unwrap(), p);
        assert_eq!(p.bits()[..8], [1, 0, 1, 0, 0, 1, 0, 1]);
    }

    proptest! {
        #[test]
        fn prop_frame_round_trip(bytes in proptest::collection::vec(any::<u8>(), 1..4),
                                 scale in 1e-3f64..1e3) {
            let payload = Payload::from_bytes(bytes).unwrap();
            let code = LdpcCode::construct(payload.bit_len().max(8), 5).unwrap();
            prop_assume!(code.message_len() == payload.bit_len());
            let f = frame(&payload, &code, 3).unwrap();
            prop_assert_eq!(f.len(), 2 * payload.bit_len() + PILOT_LEN);
            let y: Vec<f64> = f.bits().iter().map(|&b| scale * f64::from(b)).collect();
            let (outcome, _) = deframe(&y, &code, 3, None).unwrap();
            prop_assert_eq!(outcome, DeframeOutcome::Decoded(payload));
        }
    }
}
