//! Command-line surface and option resolution.
//!
//! Every option can come from a flag, a `SNOOPDNS_*` environment variable or
//! the TOML file named by `--config`, in that order of precedence.

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Deserialize;

use snoopdns::corpus::ListFormat;
use snoopdns::snoop::Method;
use snoopdns::wire::Name;

pub const DEFAULT_RATE: f64 = 10.0;
pub const DEFAULT_OUT: &str = "observations.jsonl";
pub const DEFAULT_LIVENESS_ATTEMPTS: u32 = 3;

/// Bad invocation or configuration; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "snoopdns", version, about = "DNS cache snooping scanner, reporter and resolver simulator")]
pub struct Cli {
    /// TOML file supplying defaults for any option.
    #[arg(long, global = true, env = "SNOOPDNS_CONFIG")]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Learn each domain's maximum TTL on the server.
    DiscoverTtl(ScanArgs),
    /// Probe domains and append refresh observations to the log.
    Snoop(ScanArgs),
    /// Rank domains by estimated refresh rate from an observation log.
    Report(ReportArgs),
    /// Serve a simulated resolver, or run a batch scan against one.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Default)]
pub struct ScanArgs {
    /// Resolver to probe, e.g. 10.8.0.1:53.
    #[arg(long, env = "SNOOPDNS_SERVER")]
    pub server: Option<SocketAddr>,
    /// Domain list file.
    #[arg(long, env = "SNOOPDNS_DOMAINS")]
    pub domains: Option<PathBuf>,
    /// Domain list format: csv or plain (default: from the file extension).
    #[arg(long, env = "SNOOPDNS_FORMAT")]
    pub format: Option<String>,
    /// rd0, ttl_recursive or timing.
    #[arg(long, env = "SNOOPDNS_METHOD")]
    pub method: Option<String>,
    /// Watch window as a fraction of the max TTL, in (0, 1].
    #[arg(long, env = "SNOOPDNS_WINDOW_FRACTION")]
    pub window_fraction: Option<f64>,
    /// Queries per second toward the server.
    #[arg(long, env = "SNOOPDNS_RATE")]
    pub rate: Option<f64>,
    /// Scan length: seconds or a span such as 48h.
    #[arg(long, env = "SNOOPDNS_DURATION")]
    pub duration: Option<String>,
    /// Stop each domain after this many cycles.
    #[arg(long, env = "SNOOPDNS_MAX_CYCLES")]
    pub max_cycles: Option<u64>,
    /// Observation log (JSONL). Max TTLs are kept next to it.
    #[arg(long, env = "SNOOPDNS_OUT")]
    pub out: Option<PathBuf>,
    /// Sightings needed to confirm a max TTL.
    #[arg(long, env = "SNOOPDNS_CONFIRMATIONS")]
    pub confirmations: Option<u32>,
    /// Seed for transaction ids.
    #[arg(long, env = "SNOOPDNS_SEED")]
    pub seed: Option<u64>,
    /// Confirm you are allowed to probe a non-loopback server.
    #[arg(long, env = "SNOOPDNS_AUTHORIZED")]
    pub authorized: bool,
    /// Per-query timeout in seconds.
    #[arg(long, env = "SNOOPDNS_TIMEOUT")]
    pub timeout: Option<f64>,
    /// Resolution attempts before a domain counts as dead (0 skips the check).
    #[arg(long, env = "SNOOPDNS_LIVENESS_ATTEMPTS")]
    pub liveness_attempts: Option<u32>,
    /// Seconds between liveness attempts.
    #[arg(long, env = "SNOOPDNS_LIVENESS_SPACING")]
    pub liveness_spacing: Option<f64>,
    /// Zone you control, for RD=0 canaries.
    #[arg(long, env = "SNOOPDNS_CANARY_ZONE")]
    pub canary_zone: Option<Name>,
    /// Zone you control, for timing calibration.
    #[arg(long, env = "SNOOPDNS_CALIBRATION_DOMAIN")]
    pub calibration_domain: Option<Name>,
}

#[derive(Args, Debug, Default)]
pub struct ReportArgs {
    /// Observation log to read.
    #[arg(long, env = "SNOOPDNS_LOG")]
    pub log: Option<PathBuf>,
    /// Keep only the first N domains.
    #[arg(long, env = "SNOOPDNS_TOP")]
    pub top: Option<usize>,
    /// Confidence level for the interval.
    #[arg(long, env = "SNOOPDNS_CONFIDENCE")]
    pub confidence: Option<f64>,
    /// Output on stdout: table or csv.
    #[arg(long, default_value = "table")]
    pub output: String,
    /// Also write the CSV report here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Scenario JSON file.
    pub scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long, env = "SNOOPDNS_SEED")]
    pub seed: Option<u64>,
    /// Address to serve on (realtime scenarios).
    #[arg(long)]
    pub bind: Option<SocketAddr>,
    /// Stop serving after this long (default: until interrupted).
    #[arg(long)]
    pub serve_for: Option<String>,
    /// Write batch observations to this JSONL log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the batch result as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

/// Values accepted in the `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub server: Option<SocketAddr>,
    pub domains: Option<PathBuf>,
    pub format: Option<String>,
    pub method: Option<String>,
    pub window_fraction: Option<f64>,
    pub rate: Option<f64>,
    pub duration: Option<toml::Value>,
    pub max_cycles: Option<u64>,
    pub out: Option<PathBuf>,
    pub confirmations: Option<u32>,
    pub seed: Option<u64>,
    pub authorized: Option<bool>,
    pub timeout: Option<f64>,
    pub liveness_attempts: Option<u32>,
    pub liveness_spacing: Option<f64>,
    pub canary_zone: Option<Name>,
    pub calibration_domain: Option<Name>,
    pub log: Option<PathBuf>,
    pub top: Option<usize>,
    pub confidence: Option<f64>,
}

pub fn load_file(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

/// Seconds from "300", "2.5" or a span like "48h".
pub fn parse_duration(s: &str) -> Result<f64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return Ok(v);
    }
    humantime::parse_duration(s)
        .map(|d| d.as_secs_f64())
        .map_err(|e| usage(format!("bad duration {s:?}: {e}")))
}

fn duration_value(v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Integer(i) => Ok(*i as f64),
        toml::Value::Float(f) => Ok(*f),
        toml::Value::String(s) => parse_duration(s),
        other => Err(usage(format!("bad duration {other}"))),
    }
}

#[derive(Debug, Clone)]
pub struct ScanOptions {
    pub server: SocketAddr,
    pub domains: PathBuf,
    pub format: ListFormat,
    pub method: Method,
    pub window_fraction: f64,
    pub rate: f64,
    pub duration: Option<f64>,
    pub max_cycles: Option<u64>,
    pub out: PathBuf,
    pub confirmations: u32,
    pub seed: Option<u64>,
    pub timeout: f64,
    pub liveness_attempts: u32,
    pub liveness_spacing: f64,
    pub canary_zone: Option<Name>,
    pub calibration_domain: Option<Name>,
}

impl ScanArgs {
    pub fn resolve(self, file: &FileConfig) -> Result<ScanOptions> {
        let server = self
            .server
            .or(file.server)
            .ok_or_else(|| usage("--server is required"))?;
        let domains = self
            .domains
            .or_else(|| file.domains.clone())
            .ok_or_else(|| usage("--domains is required"))?;
        let format = match self.format.or_else(|| file.format.clone()) {
            Some(f) => f.parse().map_err(usage)?,
            None => ListFormat::for_path(&domains),
        };
        let method = match self.method.or_else(|| file.method.clone()) {
            Some(m) => m.parse().map_err(usage)?,
            None => Method::TtlRecursive,
        };
        let window_fraction = self.window_fraction.or(file.window_fraction).unwrap_or(1.0);
        if !(window_fraction > 0.0 && window_fraction <= 1.0) {
            return Err(usage("--window-fraction must lie in (0, 1]"));
        }
        let rate = self.rate.or(file.rate).unwrap_or(DEFAULT_RATE);
        if !(rate.is_finite() && rate > 0.0) {
            return Err(usage("--rate must be > 0"));
        }
        let duration = match (self.duration, &file.duration) {
            (Some(s), _) => Some(parse_duration(&s)?),
            (None, Some(v)) => Some(duration_value(v)?),
            (None, None) => None,
        };
        if let Some(d) = duration {
            if !(d.is_finite() && d > 0.0) {
                return Err(usage("--duration must be > 0"));
            }
        }
        let confirmations = self.confirmations.or(file.confirmations).unwrap_or(5);
        if confirmations == 0 {
            return Err(usage("--confirmations must be >= 1"));
        }
        let timeout = self.timeout.or(file.timeout).unwrap_or(2.0);
        if !(timeout.is_finite() && timeout > 0.0) {
            return Err(usage("--timeout must be > 0"));
        }
        let authorized = self.authorized || file.authorized.unwrap_or(false);
        if !server.ip().is_loopback() && !authorized {
            return Err(usage(format!(
                "{server} is not a loopback address; pass --authorized only if you have permission to probe it"
            )));
        }
        Ok(ScanOptions {
            server,
            domains,
            format,
            method,
            window_fraction,
            rate,
            duration,
            max_cycles: self.max_cycles.or(file.max_cycles),
            out: self
                .out
                .or_else(|| file.out.clone())
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            confirmations,
            seed: self.seed.or(file.seed),
            timeout,
            liveness_attempts: self
                .liveness_attempts
                .or(file.liveness_attempts)
                .unwrap_or(DEFAULT_LIVENESS_ATTEMPTS),
            liveness_spacing: self
                .liveness_spacing
                .or(file.liveness_spacing)
                .unwrap_or(snoopdns::corpus::DEFAULT_LIVENESS_SPACING),
            canary_zone: self.canary_zone.or_else(|| file.canary_zone.clone()),
            calibration_domain: self
                .calibration_domain
                .or_else(|| file.calibration_domain.clone()),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub log: PathBuf,
    pub top: Option<usize>,
    pub confidence: f64,
    pub csv_stdout: bool,
    pub csv: Option<PathBuf>,
}

impl ReportArgs {
    pub fn resolve(self, file: &FileConfig) -> Result<ReportOptions> {
        let log = self
            .log
            .or_else(|| file.log.clone())
            .or_else(|| file.out.clone())
            .ok_or_else(|| usage("--log is required"))?;
        let confidence = self.confidence.or(file.confidence).unwrap_or(0.95);
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(usage("--confidence must lie in (0, 1)"));
        }
        let csv_stdout = match self.output.as_str() {
            "table" => false,
            "csv" => true,
            other => return Err(usage(format!("--output must be table or csv, got {other:?}"))),
        };
        Ok(ReportOptions {
            log,
            top: self.top.or(file.top),
            confidence,
            csv_stdout,
            csv: self.csv,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(server: &str) -> ScanArgs {
        ScanArgs {
            server: Some(server.parse().unwrap()),
            domains: Some("list.txt".into()),
            ..ScanArgs::default()
        }
    }

    #[test]
    fn flags_beat_file() {
        let file: FileConfig = toml::from_str("rate = 3.0\nwindow_fraction = 0.5\nduration = \"2h\"").unwrap();
        let mut a = args("127.0.0.1:53");
        a.rate = Some(7.0);
        let o = a.resolve(&file).unwrap();
        assert_eq!(o.rate, 7.0);
        assert_eq!(o.window_fraction, 0.5);
        assert_eq!(o.duration, Some(7200.0));
        assert_eq!(o.format, ListFormat::Plain);
    }

    #[test]
    fn defaults() {
        let o = args("127.0.0.1:53").resolve(&FileConfig::default()).unwrap();
        assert_eq!(o.rate, 10.0);
        assert_eq!(o.method, Method::TtlRecursive);
        assert_eq!(o.confirmations, 5);
        assert_eq!(o.out, PathBuf::from(DEFAULT_OUT));
    }

    #[test]
    fn remote_servers_need_authorization() {
        let err = args("192.0.2.53:53").resolve(&FileConfig::default()).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        let mut a = args("192.0.2.53:53");
        a.authorized = true;
        a.resolve(&FileConfig::default()).unwrap();
        let file: FileConfig = toml::from_str("authorized = true").unwrap();
        args("192.0.2.53:53").resolve(&file).unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let mut a = args("127.0.0.1:53");
        a.window_fraction = Some(0.0);
        assert!(a.resolve(&FileConfig::default()).is_err());
        let mut a = args("127.0.0.1:53");
        a.method = Some("dig".into());
        assert!(a.resolve(&FileConfig::default()).is_err());
        assert!(toml::from_str::<FileConfig>("bogus = 1").is_err());
    }

    #[test]
    fn durations() {
        assert_eq!(parse_duration("300").unwrap(), 300.0);
        assert_eq!(parse_duration("48h").unwrap(), 172_800.0);
        assert_eq!(parse_duration("5min").unwrap(), 300.0);
        assert!(parse_duration("soon").is_err());
    }
}
