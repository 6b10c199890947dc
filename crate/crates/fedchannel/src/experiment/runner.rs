//! The round loop.
//!
//! Each round: select participants, have each produce an update (senders
//! embed the frame into theirs, re-estimating the update deviation every
//! transmitting round), optionally clip, aggregate in ascending id order,
//! then let the receiver correlate the global model against its stored
//! initial weights and attempt a decode. Everything is a deterministic
//! function of the config, so a baseline run with the same seeds sees the
//! identical cohort with only the embedding removed.

use super::config::{ExperimentConfig, GradientModeConfig};
use super::log::EveRow;
use super::ExperimentError;
use crate::cdma::{self, GainParams, SpreadingPlan};
use crate::detection;
use crate::fl::{self, AggregatorConfig, GradientSource, RoundSchedule, VarianceTrace};
use crate::framing::{self, DeframeOutcome, Frame, Payload};
use crate::ldpc::LdpcCode;
use crate::nn::{self, Dataset, MlpArchitecture};
use std::time::Instant;

/// Per-round observables; see [`super::ROUND_LOG_HEADER`] for the log schema.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    /// Global-model training accuracy (Real mode only).
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
    /// Latched: once the payload is delivered this stays true.
    pub delivered: bool,
    /// Hard-decision bit error rate of the data segment against the true
    /// frame, available once the receiver starts correlating.
    pub prefec_ber: Option<f64>,
    /// Norm of the first transmitting sender's submitted update.
    pub sender_norm: Option<f64>,
    /// Mean/std of the non-sender cohort's submitted update norms.
    pub cohort_norm_mean: Option<f64>,
    pub cohort_norm_std: Option<f64>,
    /// KS comparison of the sender's update vs a regular participant's.
    pub ks_d: Option<f64>,
    pub ks_p: Option<f64>,
    /// Wall-clock diagnostic, not serialized.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryReport {
    pub delivered: bool,
    /// First round whose decode matched the payload exactly.
    pub t_observed: Option<u32>,
    /// Closed-form minimum rounds for these channel parameters.
    pub t_min_predicted: f64,
    pub final_accuracy: Option<f64>,
    /// |final accuracy - baseline accuracy| at the same round, when a
    /// baseline has been attached via [`accuracy_gap`].
    pub accuracy_gap: Option<f64>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub report: DeliveryReport,
    /// Observer-side per-participant rows (populated when eve_logging).
    pub eve_rows: Vec<EveRow>,
    /// Deviation of every submitted update, replayable as Gaussian noise.
    pub trace: VarianceTrace,
    pub decoded_payload: Option<Vec<u8>>,
}

/// Runs the experiment with embedding enabled.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput, ExperimentError> {
    run_inner(config, true)
}

/// Identical run with embedding disabled (β=1, γ=0): same seeds, same
/// selection, same raw updates; only the payload is missing.
pub fn run_baseline(config: &ExperimentConfig) -> Result<RunOutput, ExperimentError> {
    run_inner(config, false)
}

/// Absolute accuracy gap between two runs at the last round both reached.
pub fn accuracy_gap(a: &[RoundRecord], b: &[RoundRecord]) -> Option<f64> {
    let last = a.len().min(b.len()).checked_sub(1)?;
    match (a[last].accuracy, b[last].accuracy) {
        (Some(x), Some(y)) => Some((x - y).abs()),
        _ => None,
    }
}

struct Channel {
    plan: SpreadingPlan,
    code: LdpcCode,
    frame: Frame,
    payload: Payload,
}

fn build_channel(
    config: &ExperimentConfig,
    param_count: usize,
) -> Result<Channel, ExperimentError> {
    let payload = Payload::from_bytes(config.payload.load()?)?;
    let code = LdpcCode::construct(payload.bit_len(), config.shared_seed)?;
    let frame = framing::frame(&payload, &code, config.pilot_seed)?;
    let r = config.carrier_count.unwrap_or(param_count);
    if frame.len() >= r {
        return Err(ExperimentError::Config(format!(
            "frame length {} must stay below carrier count {r}",
            frame.len()
        )));
    }
    let plan = SpreadingPlan::build(config.shared_seed, param_count, r)?;
    Ok(Channel {
        plan,
        code,
        frame,
        payload,
    })
}

fn build_source(
    config: &ExperimentConfig,
    arch: &MlpArchitecture,
) -> Result<(GradientSource, Option<Dataset>), ExperimentError> {
    match &config.mode {
        GradientModeConfig::Real {
            lr,
            local_epochs,
            batch_size,
            train_samples,
            shards_per_user,
            separation,
        } => {
            let data = nn::make_synthetic_dataset_with_separation(
                arch.class_count(),
                *train_samples,
                arch.input_dim(),
                *separation,
                config.master_seed,
            )?;
            let shards =
                nn::partition_non_iid(&data, config.n, *shards_per_user, config.master_seed)?;
            let source = GradientSource::Real {
                arch: arch.clone(),
                shards,
                lr: *lr,
                local_epochs: *local_epochs,
                batch_size: *batch_size,
            };
            Ok((source, Some(data)))
        }
        GradientModeConfig::FixedGaussian { sigma } => {
            Ok((GradientSource::FixedGaussian { sigma: *sigma }, None))
        }
        GradientModeConfig::Recorded { trace_file } => {
            let text = std::fs::read_to_string(trace_file)?;
            let trace = VarianceTrace::from_csv(&text)?;
            Ok((GradientSource::RecordedVariance { trace }, None))
        }
    }
}

fn run_inner(config: &ExperimentConfig, embedding: bool) -> Result<RunOutput, ExperimentError> {
    config.validate()?;
    let arch = MlpArchitecture::new(config.arch.clone())
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let channel = build_channel(config, arch.param_count())?;
    let (source, train_data) = build_source(config, &arch)?;
    let schedule = RoundSchedule::new(config.n, config.fraction, config.selection_policy())?;
    let agg_cfg = AggregatorConfig::new(config.alpha, config.clip_norm)?;

    let w0 = nn::init_model(&arch, config.master_seed);
    let mut w = w0.clone();

    let t_min_predicted = if config.senders.is_empty() {
        f64::INFINITY
    } else {
        // The bound does not depend on sigma; any positive value works here.
        cdma::predict(
            config.n,
            channel.frame.len(),
            channel.plan.carrier_count(),
            config.delta,
            config.senders.len(),
            1.0,
        )?
        .t_min
    };

    let mut records: Vec<RoundRecord> = Vec::new();
    let mut eve_rows: Vec<EveRow> = Vec::new();
    let mut trace = VarianceTrace::default();
    let mut delivered_at: Option<u32> = None;
    let mut decoded_payload: Option<Vec<u8>> = None;

    for round in 1..=config.rounds_cap {
        let started = Instant::now();
        let selected = fl::select_participants(&schedule, round);
        let mut updates: Vec<Vec<f64>> = Vec::with_capacity(selected.len());
        for &pid in &selected {
            let mut update = source.produce_update(pid, &w, round, config.master_seed)?;
            if embedding && config.senders.contains(&pid) {
                let sigma_hat = cdma::estimate_sigma(&update, &channel.plan)?;
                let gains = GainParams::new(config.delta, sigma_hat, channel.frame.len())?;
                update = cdma::embed(&update, channel.frame.bits(), &gains, &channel.plan)?;
            }
            updates.push(update);
        }
        for (&pid, update) in selected.iter().zip(&updates) {
            trace.record(round, pid, fl::update_std(update));
        }

        // Observer's view of the submitted updates, before server clipping.
        let sender_pos = selected.iter().position(|pid| config.senders.contains(pid));
        let sender_norm = sender_pos.map(|i| detection::frobenius_norm(&updates[i]));
        let cohort_norms: Vec<f64> = selected
            .iter()
            .zip(&updates)
            .filter(|(pid, _)| !config.senders.contains(pid))
            .map(|(_, u)| detection::frobenius_norm(u))
            .collect();
        let (cohort_norm_mean, cohort_norm_std) = if cohort_norms.is_empty() {
            (None, None)
        } else {
            let n = cohort_norms.len() as f64;
            let mean = cohort_norms.iter().sum::<f64>() / n;
            let var = if cohort_norms.len() > 1 {
                cohort_norms
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / (n - 1.0)
            } else {
                0.0
            };
            (Some(mean), Some(var.sqrt()))
        };
        let mut ks_d = None;
        let mut ks_p = None;
        if config.eve_logging {
            if let Some(si) = sender_pos {
                if let Some(ri) = selected
                    .iter()
                    .position(|pid| !config.senders.contains(pid))
                {
                    let ks = detection::ks_two_sample(&updates[si], &updates[ri])
                        .map_err(|e| ExperimentError::Config(e.to_string()))?;
                    ks_d = Some(ks.d_statistic);
                    ks_p = Some(ks.p_value);
                }
            }
            let refs: Vec<(usize, &[f64])> = selected
                .iter()
                .zip(&updates)
                .map(|(&pid, u)| (pid, u.as_slice()))
                .collect();
            for row in detection::norm_report(round, &refs) {
                let is_flagged_sender = sender_pos
                    .map(|i| selected[i] == row.participant)
                    .unwrap_or(false);
                eve_rows.push(EveRow {
                    round,
                    participant: row.participant,
                    norm: row.norm,
                    z_score: row.z_score,
                    ks_d: if is_flagged_sender { ks_d } else { None },
                    ks_p: if is_flagged_sender { ks_p } else { None },
                });
            }
        }

        w = fl::aggregate(&w, &updates, &agg_cfg)?;

        // Receiver attempt: one correlation plus one decode pass per round.
        let y = cdma::correlate(&w, &w0, &channel.plan, channel.frame.len())?;
        let (outcome, prefec_ber) =
            framing::deframe(&y, &channel.code, config.pilot_seed, Some(&channel.frame))?;
        if delivered_at.is_none() {
            if let DeframeOutcome::Decoded(decoded) = &outcome {
                if decoded.bytes() == channel.payload.bytes() {
                    delivered_at = Some(round);
                    decoded_payload = Some(decoded.bytes().to_vec());
                }
            }
        }

        let (accuracy, loss) = match &train_data {
            Some(data) => {
                let (acc, loss) = nn::evaluate(&w, &arch, data)?;
                (Some(acc), Some(loss))
            }
            None => (None, None),
        };

        records.push(RoundRecord {
            round,
            accuracy,
            loss,
            delivered: delivered_at.is_some(),
            prefec_ber,
            sender_norm,
            cohort_norm_mean,
            cohort_norm_std,
            ks_d,
            ks_p,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        if let (Some(t), Some(grace)) = (delivered_at, config.stop_grace) {
            if round >= t.saturating_add(grace) {
                break;
            }
        }
    }

    let final_accuracy = records.last().and_then(|r| r.accuracy);
    Ok(RunOutput {
        report: DeliveryReport {
            delivered: delivered_at.is_some(),
            t_observed: delivered_at,
            t_min_predicted,
            final_accuracy,
            accuracy_gap: None,
        },
        records,
        eve_rows,
        trace,
        decoded_payload,
    })
}
