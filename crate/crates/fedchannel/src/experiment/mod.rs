//! Experiment orchestration: the federated round loop with embedding,
//! receiver decode attempts, logging, baseline comparison, and reports.

mod config;
mod log;
mod runner;

pub use config::{
    parse_config, ExperimentConfig, GradientModeConfig, PayloadSource, SelectionKind,
};
pub use log::{
    eve_log_to_string, read_round_log, round_log_from_string, round_log_to_string, write_eve_log,
    write_round_log, EveRow, EVE_LOG_HEADER, ROUND_LOG_HEADER,
};
pub use runner::{
    accuracy_gap, run_baseline, run_experiment, DeliveryReport, RoundRecord, RunOutput,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Fl(#[from] crate::fl::FlError),
    #[error(transparent)]
    Channel(#[from] crate::cdma::ChannelError),
    #[error(transparent)]
    Framing(#[from] crate::framing::FramingError),
    #[error(transparent)]
    Codec(#[from] crate::ldpc::CodecError),
}
