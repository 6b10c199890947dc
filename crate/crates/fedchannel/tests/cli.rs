//! Black-box tests of the command-line interface.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedchannel"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fedchannel-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const SMALL_CONFIG: &str = "\
n = 20
fraction = 1.0
rounds_cap = 5
mode = fixed_gaussian
sigma = 1.0
arch = 784,28,10
senders = 0
receiver = 19
delta = 1.0
payload_text = hi
shared_seed = 41
pilot_seed = 42
master_seed = 43
eve_logging = true
";

#[test]
fn predict_prints_the_bound() {
    let out = bin()
        .args([
            "predict", "--n", "100", "--p", "292", "--r", "22270", "--delta", "1", "--m", "1",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("1.33"), "stdout: {stdout}");
    assert!(stdout.contains("ceil 2"), "stdout: {stdout}");
}

#[test]
fn missing_config_fails_with_diagnostic() {
    let out = bin().args(["run", "/no/such/config.cfg"]).output().unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_key_is_reported() {
    let dir = temp_dir("badkey");
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, format!("{SMALL_CONFIG}\nwhatever = 1\n")).unwrap();
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("whatever"), "stderr: {stderr}");
}

#[test]
fn run_is_reproducible_and_detectable() {
    let dir = temp_dir("repro");
    let cfg = dir.join("exp.cfg");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();

    let log_a = dir.join("a.csv");
    let log_b = dir.join("b.csv");
    let decoded = dir.join("payload.bin");
    let eve = dir.join("eve.csv");
    let trace = dir.join("trace.csv");

    let out = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(&log_a)
        .arg("--decoded-out")
        .arg(&decoded)
        .arg("--eve-out")
        .arg(&eve)
        .arg("--trace-out")
        .arg(&trace)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("delivered at round"), "stdout: {stdout}");
    assert_eq!(std::fs::read(&decoded).unwrap(), b"hi");
    assert!(std::fs::read_to_string(&eve)
        .unwrap()
        .starts_with("round,participant,norm,z"));
    assert!(std::fs::read_to_string(&trace)
        .unwrap()
        .starts_with("round,participant_id,std"));

    let out = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(&log_b)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(&log_a).unwrap(),
        std::fs::read(&log_b).unwrap(),
        "same config must produce byte-identical round logs"
    );

    // The non-stealthy sender should be flagged by the observer scan.
    let out = bin().arg("detect").arg(&log_a).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("FLAGGED"), "stdout: {stdout}");
}

#[test]
fn baseline_subcommand_reports_no_delivery() {
    let dir = temp_dir("baseline");
    let cfg = dir.join("exp.cfg");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let log = dir.join("base.csv");
    let out = bin()
        .arg("baseline")
        .arg(&cfg)
        .arg("--out")
        .arg(&log)
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("not delivered"), "stdout: {stdout}");
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text
        .lines()
        .skip(1)
        .all(|l| l.is_empty() || l.contains("false")));
}

#[test]
fn ldpc_test_subcommand_reports_rates() {
    let out = bin()
        .args([
            "ldpc-test",
            "--k",
            "96",
            "--trials",
            "50",
            "--noise",
            "0.487",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("exact decodes"), "stdout: {stdout}");
    assert!(stdout.contains("raw BER"), "stdout: {stdout}");
}
