//! Experiment configuration: validated struct plus a flat `key = value`
//! text format. Unknown keys are rejected; keys tied to a gradient mode are
//! only accepted when that mode is selected.

use crate::fl::SelectionPolicy;
use crate::nn::MlpArchitecture;
use std::path::PathBuf;

use super::ExperimentError;

/// Where the covert payload bytes come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PayloadSource {
    Text(String),
    File(PathBuf),
}

impl PayloadSource {
    pub fn load(&self) -> Result<Vec<u8>, ExperimentError> {
        match self {
            PayloadSource::Text(t) => Ok(t.as_bytes().to_vec()),
            PayloadSource::File(p) => Ok(std::fs::read(p)?),
        }
    }
}

/// Gradient source selection with its mode-specific knobs.
#[derive(Debug, Clone, PartialEq)]
pub enum GradientModeConfig {
    Real {
        lr: f64,
        local_epochs: usize,
        batch_size: usize,
        train_samples: usize,
        shards_per_user: usize,
        /// Class-center separation of the synthetic blobs; small values
        /// leave irreducible error so gradients never die out.
        separation: f64,
    },
    FixedGaussian {
        sigma: f64,
    },
    Recorded {
        trace_file: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionKind {
    Random,
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n: usize,
    pub fraction: f64,
    pub selection: SelectionKind,
    pub rounds_cap: u32,
    pub mode: GradientModeConfig,
    pub arch: Vec<usize>,
    /// Coherent senders; all embed the same frame with the same plan.
    pub senders: Vec<usize>,
    pub receiver: usize,
    /// Stealth level; 1 = no stealth (full payload power).
    pub delta: f64,
    pub payload: PayloadSource,
    pub shared_seed: u64,
    pub pilot_seed: u64,
    pub master_seed: u64,
    pub alpha: f64,
    pub clip_norm: Option<f64>,
    /// Carrier count R; defaults to the full parameter count.
    pub carrier_count: Option<usize>,
    pub eve_logging: bool,
    /// Stop this many rounds after first delivery instead of running to cap.
    pub stop_grace: Option<u32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 100,
            fraction: 1.0,
            selection: SelectionKind::Random,
            rounds_cap: 100,
            mode: GradientModeConfig::Real {
                lr: 0.05,
                local_epochs: 1,
                batch_size: 32,
                train_samples: 4000,
                shards_per_user: 2,
                separation: crate::nn::DEFAULT_CLASS_SEPARATION,
            },
            arch: vec![784, 28, 10],
            senders: vec![0],
            receiver: 99,
            delta: 0.1,
            payload: PayloadSource::Text("hello world!".to_string()),
            shared_seed: 1,
            pilot_seed: 2,
            master_seed: 3,
            alpha: 1.0,
            clip_norm: None,
            carrier_count: None,
            eve_logging: false,
            stop_grace: None,
        }
    }
}

impl ExperimentConfig {
    pub fn selection_policy(&self) -> SelectionPolicy {
        match self.selection {
            SelectionKind::Random => SelectionPolicy::Random {
                seed: self.master_seed,
            },
            SelectionKind::RoundRobin => SelectionPolicy::RoundRobin,
        }
    }

    /// Structural checks that do not require touching the filesystem.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let arch = MlpArchitecture::new(self.arch.clone())
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.n == 0 {
            return Err(ExperimentError::Config("n must be positive".into()));
        }
        if self.receiver >= self.n {
            return Err(ExperimentError::Config(format!(
                "receiver {} outside cohort of {}",
                self.receiver, self.n
            )));
        }
        if let Some(&s) = self.senders.iter().find(|&&s| s >= self.n) {
            return Err(ExperimentError::Config(format!(
                "sender {s} outside cohort of {}",
                self.n
            )));
        }
        if self.senders.contains(&self.receiver) {
            return Err(ExperimentError::Config(
                "receiver cannot also be a sender".into(),
            ));
        }
        {
            let mut sorted = self.senders.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.senders.len() {
                return Err(ExperimentError::Config("duplicate sender ids".into()));
            }
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(ExperimentError::Config(format!(
                "delta must lie in (0, 1], got {}",
                self.delta
            )));
        }
        if self.rounds_cap == 0 {
            return Err(ExperimentError::Config(
                "rounds_cap must be positive".into(),
            ));
        }
        if !(self.alpha > 0.0) {
            return Err(ExperimentError::Config("alpha must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(ExperimentError::Config("clip_norm must be positive".into()));
            }
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(ExperimentError::Config(
                "fraction must lie in (0, 1]".into(),
            ));
        }
        if let Some(r) = self.carrier_count {
            if r > arch.param_count() {
                return Err(ExperimentError::Config(format!(
                    "carrier_count {r} exceeds parameter count {}",
                    arch.param_count()
                )));
            }
        }
        match &self.mode {
            GradientModeConfig::Real {
                lr,
                local_epochs,
                batch_size,
                train_samples,
                shards_per_user,
                separation,
            } => {
                if !(*lr > 0.0) {
                    return Err(ExperimentError::Config("lr must be positive".into()));
                }
                if !(*separation > 0.0) {
                    return Err(ExperimentError::Config(
                        "separation must be positive".into(),
                    ));
                }
                if *local_epochs == 0 || *batch_size == 0 {
                    return Err(ExperimentError::Config(
                        "local_epochs and batch_size must be positive".into(),
                    ));
                }
                let shards = self.n * shards_per_user;
                if shards == 0 || train_samples % shards != 0 {
                    return Err(ExperimentError::Config(format!(
                        "train_samples {train_samples} not divisible into {shards} shards"
                    )));
                }
            }
            GradientModeConfig::FixedGaussian { sigma } => {
                if !(*sigma > 0.0) {
                    return Err(ExperimentError::Config("sigma must be positive".into()));
                }
            }
            GradientModeConfig::Recorded { .. } => {}
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ExperimentError> {
    value
        .parse()
        .map_err(|_| ExperimentError::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ExperimentError> {
    let trimmed = value.trim();
    if trimmed.is_empty() || trimmed == "none" {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect()
}

/// Parses the flat `key = value` config text. Lines starting with `#` and
/// blank lines are ignored; every other line must be `key = value`.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::default();
    let mut mode_name: Option<String> = None;
    let mut lr = 0.05;
    let mut local_epochs = 1usize;
    let mut batch_size = 32usize;
    let mut train_samples = 4000usize;
    let mut shards_per_user = 2usize;
    let mut sigma = 1.0f64;
    let mut separation = crate::nn::DEFAULT_CLASS_SEPARATION;
    let mut trace_file: Option<PathBuf> = None;
    let mut payload_text: Option<String> = None;
    let mut payload_file: Option<PathBuf> = None;
    let mut real_keys_seen = Vec::new();
    let mut gaussian_keys_seen = Vec::new();
    let mut recorded_keys_seen = Vec::new();

    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ExperimentError::Config(format!(
                "line {}: expected key = value",
                ln + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "n" => cfg.n = parse_num(key, value)?,
            "fraction" => cfg.fraction = parse_num(key, value)?,
            "selection" => {
                cfg.selection = match value {
                    "random" => SelectionKind::Random,
                    "round_robin" => SelectionKind::RoundRobin,
                    other => {
                        return Err(ExperimentError::Config(format!(
                            "selection must be random or round_robin, got {other:?}"
                        )))
                    }
                }
            }
            "rounds_cap" => cfg.rounds_cap = parse_num(key, value)?,
            "mode" => mode_name = Some(value.to_string()),
            "lr" => {
                lr = parse_num(key, value)?;
                real_keys_seen.push(key);
            }
            "local_epochs" => {
                local_epochs = parse_num(key, value)?;
                real_keys_seen.push(key);
            }
            "batch_size" => {
                batch_size = parse_num(key, value)?;
                real_keys_seen.push(key);
            }
            "train_samples" => {
                train_samples = parse_num(key, value)?;
                real_keys_seen.push(key);
            }
            "shards_per_user" => {
                shards_per_user = parse_num(key, value)?;
                real_keys_seen.push(key);
            }
            "separation" => {
                separation = parse_num(key, value)?;
                real_keys_seen.push(key);
            }
            "sigma" => {
                sigma = parse_num(key, value)?;
                gaussian_keys_seen.push(key);
            }
            "trace_file" => {
                trace_file = Some(PathBuf::from(value));
                recorded_keys_seen.push(key);
            }
            "arch" => {
                cfg.arch = parse_list(key, value)?;
            }
            "senders" => cfg.senders = parse_list(key, value)?,
            "receiver" => cfg.receiver = parse_num(key, value)?,
            "delta" => cfg.delta = parse_num(key, value)?,
            "payload_text" => payload_text = Some(value.to_string()),
            "payload_file" => payload_file = Some(PathBuf::from(value)),
            "shared_seed" => cfg.shared_seed = parse_num(key, value)?,
            "pilot_seed" => cfg.pilot_seed = parse_num(key, value)?,
            "master_seed" => cfg.master_seed = parse_num(key, value)?,
            "alpha" => cfg.alpha = parse_num(key, value)?,
            "clip_norm" => cfg.clip_norm = Some(parse_num(key, value)?),
            "carrier_count" => cfg.carrier_count = Some(parse_num(key, value)?),
            "eve_logging" => {
                cfg.eve_logging = match value {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(ExperimentError::Config(format!(
                            "eve_logging must be true or false, got {other:?}"
                        )))
                    }
                }
            }
            "stop_grace" => cfg.stop_grace = Some(parse_num(key, value)?),
            other => {
                return Err(ExperimentError::Config(format!("unknown key {other:?}")));
            }
        }
    }

    let mode_name = mode_name.unwrap_or_else(|| "real".to_string());
    cfg.mode = match mode_name.as_str() {
        "real" => {
            if !gaussian_keys_seen.is_empty() || !recorded_keys_seen.is_empty() {
                return Err(ExperimentError::Config(format!(
                    "keys {:?} require a gaussian/recorded mode",
                    [gaussian_keys_seen, recorded_keys_seen].concat()
                )));
            }
            GradientModeConfig::Real {
                lr,
                local_epochs,
                batch_size,
                train_samples,
                shards_per_user,
                separation,
            }
        }
        "fixed_gaussian" => {
            if !real_keys_seen.is_empty() || !recorded_keys_seen.is_empty() {
                return Err(ExperimentError::Config(format!(
                    "keys {:?} do not apply to fixed_gaussian mode",
                    [real_keys_seen, recorded_keys_seen].concat()
                )));
            }
            GradientModeConfig::FixedGaussian { sigma }
        }
        "recorded" => {
            if !real_keys_seen.is_empty() || !gaussian_keys_seen.is_empty() {
                return Err(ExperimentError::Config(format!(
                    "keys {:?} do not apply to recorded mode",
                    [real_keys_seen, gaussian_keys_seen].concat()
                )));
            }
            let trace_file = trace_file.ok_or_else(|| {
                ExperimentError::Config("recorded mode requires trace_file".into())
            })?;
            GradientModeConfig::Recorded { trace_file }
        }
        other => {
            return Err(ExperimentError::Config(format!(
                "mode must be real, fixed_gaussian or recorded, got {other:?}"
            )))
        }
    };

    match (payload_text, payload_file) {
        (Some(_), Some(_)) => {
            return Err(ExperimentError::Config(
                "payload_text and payload_file are mutually exclusive".into(),
            ))
        }
        (Some(t), None) => cfg.payload = PayloadSource::Text(t),
        (None, Some(f)) => cfg.payload = PayloadSource::File(f),
        (None, None) => {}
    }

    cfg.validate()?;
    Ok(cfg)
}
