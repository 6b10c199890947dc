//! Round-log CSV serialization.
//!
//! Schema (one row per round):
//! `round,accuracy,loss,delivered,prefec_ber,sender_norm,cohort_norm_mean,cohort_norm_std,ks_d,ks_p`
//!
//! Missing values serialize as empty fields. Floats use the shortest
//! round-trip decimal form, so write -> read is lossless. Wall-clock time is
//! a per-run diagnostic and is not serialized.

use std::fmt::Write as _;
use std::path::Path;

use super::{ExperimentError, RoundRecord};

pub const ROUND_LOG_HEADER: &str =
    "round,accuracy,loss,delivered,prefec_ber,sender_norm,cohort_norm_mean,cohort_norm_std,ks_d,ks_p";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(field: &str, line: usize) -> Result<Option<f64>, ExperimentError> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| ExperimentError::Config(format!("round log line {line}: bad float {field:?}")))
}

pub fn round_log_to_string(records: &[RoundRecord]) -> String {
    let mut out = String::from(ROUND_LOG_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.round,
            opt(r.accuracy),
            opt(r.loss),
            r.delivered,
            opt(r.prefec_ber),
            opt(r.sender_norm),
            opt(r.cohort_norm_mean),
            opt(r.cohort_norm_std),
            opt(r.ks_d),
            opt(r.ks_p),
        );
    }
    out
}

pub fn write_round_log(records: &[RoundRecord], path: &Path) -> Result<(), ExperimentError> {
    std::fs::write(path, round_log_to_string(records))?;
    Ok(())
}

pub fn round_log_from_string(text: &str) -> Result<Vec<RoundRecord>, ExperimentError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == ROUND_LOG_HEADER => {}
        other => {
            return Err(ExperimentError::Config(format!(
                "round log header mismatch: {other:?}"
            )))
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ln = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(ExperimentError::Config(format!(
                "round log line {ln}: expected 10 fields, got {}",
                fields.len()
            )));
        }
        records.push(RoundRecord {
            round: fields[0]
                .trim()
                .parse()
                .map_err(|_| ExperimentError::Config(format!("round log line {ln}: bad round")))?,
            accuracy: parse_opt(fields[1], ln)?,
            loss: parse_opt(fields[2], ln)?,
            delivered: match fields[3].trim() {
                "true" => true,
                "false" => false,
                other => {
                    return Err(ExperimentError::Config(format!(
                        "round log line {ln}: bad delivered flag {other:?}"
                    )))
                }
            },
            prefec_ber: parse_opt(fields[4], ln)?,
            sender_norm: parse_opt(fields[5], ln)?,
            cohort_norm_mean: parse_opt(fields[6], ln)?,
            cohort_norm_std: parse_opt(fields[7], ln)?,
            ks_d: parse_opt(fields[8], ln)?,
            ks_p: parse_opt(fields[9], ln)?,
            wall_ms: 0.0,
        });
    }
    Ok(records)
}

pub fn read_round_log(path: &Path) -> Result<Vec<RoundRecord>, ExperimentError> {
    round_log_from_string(&std::fs::read_to_string(path)?)
}

/// One row of the observer-side log: per-participant norms with the KS
/// comparison attached to the sender row of each transmitting round.
#[derive(Debug, Clone, PartialEq)]
pub struct EveRow {
    pub round: u32,
    pub participant: usize,
    pub norm: f64,
    pub z_score: f64,
    pub ks_d: Option<f64>,
    pub ks_p: Option<f64>,
}

pub const EVE_LOG_HEADER: &str = "round,participant,norm,z,ks_d,ks_p";

pub fn eve_log_to_string(rows: &[EveRow]) -> String {
    let mut out = String::from(EVE_LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            r.participant,
            r.norm,
            r.z_score,
            opt(r.ks_d),
            opt(r.ks_p),
        );
    }
    out
}

pub fn write_eve_log(rows: &[EveRow], path: &Path) -> Result<(), ExperimentError> {
    std::fs::write(path, eve_log_to_string(rows))?;
    Ok(())
}
