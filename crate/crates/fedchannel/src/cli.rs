//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or I/O problem.

use crate::experiment::{self, ExperimentError, RunOutput};
use crate::ldpc::{self, LdpcCode};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::ffi::OsString;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "fedchannel",
    version,
    about = "Covert-channel experiments over federated learning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment described by a key=value config file
    Run {
        config: PathBuf,
        /// Round log destination
        #[arg(long, default_value = "round_log.csv")]
        out: PathBuf,
        /// Write the decoded payload bytes here on delivery
        #[arg(long)]
        decoded_out: Option<PathBuf>,
        /// Write the observer's per-participant log here (needs eve_logging)
        #[arg(long)]
        eve_out: Option<PathBuf>,
        /// Write the per-round update-deviation trace here
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Run the same experiment with embedding disabled
    Baseline {
        config: PathBuf,
        #[arg(long, default_value = "baseline_log.csv")]
        out: PathBuf,
    },
    /// Print the delivery-time bound for a parameter set
    Predict {
        #[arg(long)]
        n: usize,
        /// Frame length in bits (coded payload plus pilots)
        #[arg(long)]
        p: usize,
        /// Carrier count
        #[arg(long)]
        r: usize,
        #[arg(long)]
        delta: f64,
        /// Coherent sender count
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Also report the correlator variance after this many rounds
        #[arg(long)]
        t: Option<f64>,
    },
    /// Monte Carlo exercise of the LDPC codec over a Gaussian channel
    LdpcTest {
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Channel noise standard deviation on unit-amplitude bits
        #[arg(long)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Scan a round log for rounds the observer would flag
    Detect {
        log: PathBuf,
        /// KS significance threshold
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
    },
}

pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                ExperimentError::Config(_) | ExperimentError::Io(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), ExperimentError> {
    match cmd {
        Cmd::Run {
            config,
            out,
            decoded_out,
            eve_out,
            trace_out,
        } => {
            let cfg = load_config(&config)?;
            let run = experiment::run_experiment(&cfg)?;
            summarize(&run);
            if let Some(payload) = &run.decoded_payload {
                println!(
                    "decoded payload: {} bytes, fnv1a64 {:016x}",
                    payload.len(),
                    fnv1a64(payload)
                );
                if let Some(path) = decoded_out {
                    std::fs::write(&path, payload)?;
                    println!("decoded payload written to {}", path.display());
                }
            }
            experiment::write_round_log(&run.records, &out)?;
            println!(
                "round log: {} ({} rounds)",
                out.display(),
                run.records.len()
            );
            if let Some(path) = eve_out {
                experiment::write_eve_log(&run.eve_rows, &path)?;
                println!(
                    "observer log: {} ({} rows)",
                    path.display(),
                    run.eve_rows.len()
                );
            }
            if let Some(path) = trace_out {
                std::fs::write(&path, run.trace.to_csv())?;
                println!(
                    "variance trace: {} ({} entries)",
                    path.display(),
                    run.trace.len()
                );
            }
            Ok(())
        }
        Cmd::Baseline { config, out } => {
            let cfg = load_config(&config)?;
            let run = experiment::run_baseline(&cfg)?;
            summarize(&run);
            experiment::write_round_log(&run.records, &out)?;
            println!(
                "round log: {} ({} rounds)",
                out.display(),
                run.records.len()
            );
            Ok(())
        }
        Cmd::Predict {
            n,
            p,
            r,
            delta,
            m,
            sigma,
            t,
        } => {
            let prediction = crate::cdma::predict(n, p, r, delta, m, sigma)?;
            println!(
                "t_min = {:.2} rounds (ceil {})",
                prediction.t_min,
                prediction.t_min.ceil() as u64
            );
            let at = t.unwrap_or_else(|| prediction.t_min.ceil().max(1.0));
            println!(
                "correlator variance after {at:.0} rounds = {:.4}",
                prediction.y_variance(at)
            );
            Ok(())
        }
        Cmd::LdpcTest {
            k,
            trials,
            noise,
            seed,
        } => {
            if !(noise > 0.0) {
                return Err(ExperimentError::Config("noise must be positive".into()));
            }
            let code = LdpcCode::construct(k, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut exact = 0usize;
            let mut raw_errs = 0usize;
            for _ in 0..trials {
                let m: Vec<u8> = (0..k).map(|_| rng.random_range(0..2u8)).collect();
                let cw = code.encode(&m)?;
                let llr: Vec<f64> = cw
                    .iter()
                    .map(|&b| {
                        let tx = if b == 0 { 1.0 } else { -1.0 };
                        let y: f64 = tx + noise * rng.sample::<f64, _>(StandardNormal);
                        if (y >= 0.0) != (b == 0) {
                            raw_errs += 1;
                        }
                        2.0 * y / (noise * noise)
                    })
                    .collect();
                let dec = code.bp_decode(&llr, ldpc::DEFAULT_MAX_ITERS)?;
                if dec.converged && dec.message == m {
                    exact += 1;
                }
            }
            let raw_ber = raw_errs as f64 / (trials * code.codeword_len()) as f64;
            println!(
                "k = {k}, p = {}, noise = {noise}: raw BER {:.4}, exact decodes {exact}/{trials} ({:.1}%)",
                code.codeword_len(),
                raw_ber,
                100.0 * exact as f64 / trials as f64
            );
            Ok(())
        }
        Cmd::Detect { log, alpha } => {
            let records = experiment::read_round_log(&log)?;
            let mut tested = 0usize;
            let mut flagged = 0usize;
            for r in &records {
                if let Some(p) = r.ks_p {
                    tested += 1;
                    if p < alpha {
                        flagged += 1;
                        println!(
                            "round {}: FLAGGED ks_p = {:.3e}, ks_d = {:.4}, sender norm {}",
                            r.round,
                            p,
                            r.ks_d.unwrap_or(f64::NAN),
                            r.sender_norm.map(|v| format!("{v:.4}")).unwrap_or_default(),
                        );
                    }
                }
            }
            println!("flagged {flagged} of {tested} tested rounds at alpha = {alpha}");
            Ok(())
        }
    }
}

fn load_config(path: &PathBuf) -> Result<experiment::ExperimentConfig, ExperimentError> {
    let text = std::fs::read_to_string(path)?;
    experiment::parse_config(&text)
}

fn summarize(run: &RunOutput) {
    match run.report.t_observed {
        Some(t) => println!(
            "delivered at round {t} (theory minimum {:.2} rounds)",
            run.report.t_min_predicted
        ),
        None => println!("not delivered within the round cap"),
    }
    if let Some(acc) = run.report.final_accuracy {
        println!("final training accuracy = {acc:.4}");
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}
