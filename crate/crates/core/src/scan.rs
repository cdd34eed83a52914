//! Multi-domain scans against one server, and batch runs against the
//! simulator.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;

use crate::clock::{virtual_runtime, Clock, Timestamp};
use crate::estimation::{aggregate, estimate_all, z_for_confidence, ArrivalEstimate, EstimationError};
use crate::ratelimit::RateLimiter;
use crate::sim::{build_sim, SimConfig, SimError, SimTransport};
use crate::snoop::{
    discover_max_ttl, DiscoveryOptions, MaxTtlEstimate, Method, ProbeConfig, ProbeError, Prober,
    RefreshObservation, SnoopItem, SnoopPlan, SnoopSummary,
};
use crate::transport::Transport;
use crate::wire::Name;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("invalid scan settings: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

fn default_method() -> Method {
    Method::TtlRecursive
}
fn default_window_fraction() -> f64 {
    1.0
}
fn default_rate() -> f64 {
    10.0
}
fn default_confirmations() -> u32 {
    crate::snoop::DEFAULT_CONFIRMATIONS
}
fn default_confidence() -> f64 {
    0.95
}
fn default_timeout() -> f64 {
    2.0
}
fn default_retries() -> u32 {
    3
}
fn default_calibration_samples() -> usize {
    50
}

/// Scan parameters shared by the CLI and batch scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSettings {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_window_fraction")]
    pub window_fraction: f64,
    /// Queries per second toward the server.
    #[serde(default = "default_rate")]
    pub rate: f64,
    /// Seconds of probing after max-TTL discovery.
    pub duration: f64,
    #[serde(default)]
    pub max_cycles: Option<u64>,
    #[serde(default = "default_confirmations")]
    pub confirmations: u32,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    /// Domains to probe; batch runs default to every simulated client domain.
    #[serde(default)]
    pub domains: Vec<Name>,
    /// Known maximum TTLs; anything missing is discovered first.
    #[serde(default)]
    pub max_ttls: BTreeMap<Name, u32>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Zone used for timing calibration (unique names are minted beneath it).
    #[serde(default)]
    pub calibration_domain: Option<Name>,
    #[serde(default = "default_calibration_samples")]
    pub calibration_samples: usize,
}

impl ScanSettings {
    pub fn new(duration: f64) -> ScanSettings {
        ScanSettings {
            method: default_method(),
            window_fraction: default_window_fraction(),
            rate: default_rate(),
            duration,
            max_cycles: None,
            confirmations: default_confirmations(),
            confidence: default_confidence(),
            domains: Vec::new(),
            max_ttls: BTreeMap::new(),
            timeout_secs: default_timeout(),
            retries: default_retries(),
            calibration_domain: None,
            calibration_samples: default_calibration_samples(),
        }
    }

    pub fn validate(&self) -> Result<(), ScanError> {
        let bad = |m: &str| Err(ScanError::Config(m.to_string()));
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return bad("rate must be > 0");
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return bad("window_fraction must lie in (0, 1]");
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return bad("duration must be > 0");
        }
        if self.confirmations == 0 {
            return bad("confirmations must be >= 1");
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("confidence must lie in (0, 1)");
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return bad("timeout_secs must be > 0");
        }
        Ok(())
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            timeout: Duration::from_secs_f64(self.timeout_secs),
            retries: self.retries,
            ..ProbeConfig::default()
        }
    }

    pub fn discovery(&self) -> DiscoveryOptions {
        DiscoveryOptions {
            required_confirmations: self.confirmations,
            max_rounds: self.confirmations * 3,
            ..DiscoveryOptions::default()
        }
    }
}

/// Runs max-TTL discovery for every domain concurrently. Results keep the
/// input order.
pub async fn discover_all<T: Transport>(
    prober: Arc<Prober<T>>,
    domains: &[Name],
    opts: &DiscoveryOptions,
) -> Vec<(Name, Result<MaxTtlEstimate, ProbeError>)> {
    let handles: Vec<_> = domains
        .iter()
        .map(|d| {
            let (prober, d, opts) = (prober.clone(), d.clone(), opts.clone());
            tokio::spawn(async move { discover_max_ttl(&prober, &d, &opts).await })
        })
        .collect();
    let mut out = Vec::with_capacity(domains.len());
    for (d, h) in domains.iter().zip(handles) {
        let r = h.await.expect("discovery task panicked");
        out.push((d.clone(), r));
    }
    out
}

/// Runs one snooping task per domain; every item is handed to `on_item` as it
/// arrives.
pub async fn snoop_all<T: Transport, F: FnMut(SnoopItem)>(
    prober: Arc<Prober<T>>,
    targets: Vec<(Name, SnoopPlan)>,
    mut on_item: F,
) -> Vec<(Name, SnoopSummary)> {
    let (tx, mut rx) = mpsc::unbounded_channel();
    let handles: Vec<_> = targets
        .into_iter()
        .map(|(domain, plan)| {
            let (prober, tx) = (prober.clone(), tx.clone());
            let name = domain.clone();
            let h = tokio::spawn(async move {
                let mut sink = |item| {
                    let _ = tx.send(item);
                };
                crate::snoop::snoop_domain(&prober, &domain, &plan, &mut sink).await
            });
            (name, h)
        })
        .collect();
    drop(tx);
    while let Some(item) = rx.recv().await {
        on_item(item);
    }
    let mut out = Vec::with_capacity(handles.len());
    for (name, h) in handles {
        out.push((name, h.await.expect("snoop task panicked")));
    }
    out
}

/// A simulator configuration plus how to scan it (batch) or where to serve it
/// (realtime).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub sim: SimConfig,
    #[serde(default)]
    pub scan: Option<ScanSettings>,
    #[serde(default)]
    pub bind: Option<SocketAddr>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScanError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| {
            ScanError::Config(format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        s.sim.validate()?;
        if let Some(scan) = &s.scan {
            scan.validate()?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRow {
    pub domain: Name,
    pub true_lambda: f64,
    pub max_ttl: Option<u32>,
    pub estimate: Option<ArrivalEstimate>,
    pub covered: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchReport {
    pub rows: Vec<BatchRow>,
    pub observations: Vec<RefreshObservation>,
    pub queries_sent: u64,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
}

impl BatchReport {
    pub fn coverage(&self) -> (usize, usize) {
        let with = self.rows.iter().filter(|r| r.estimate.is_some()).count();
        (self.rows.iter().filter(|r| r.covered).count(), with)
    }
}

/// Runs a full scan of the scenario on virtual time. Must not be called from
/// inside a tokio runtime.
pub fn run_batch(scenario: &Scenario) -> Result<BatchReport, ScanError> {
    virtual_runtime().block_on(run_batch_async(scenario))
}

/// [`run_batch`] for callers already on a paused-time runtime.
pub async fn run_batch_async(scenario: &Scenario) -> Result<BatchReport, ScanError> {
    scenario.sim.validate()?;
    let settings = scenario
        .scan
        .clone()
        .ok_or_else(|| ScanError::Config("batch run needs a scan section".into()))?;
    settings.validate()?;
    let z = z_for_confidence(settings.confidence)?;

    let sim = build_sim(scenario.sim.clone())?;
    let started_at = sim.lock().expect("sim lock").now();
    let clock = Clock::starting_at(started_at);
    let limiter = Arc::new(
        RateLimiter::new(settings.rate, clock).map_err(|e| ScanError::Config(e.to_string()))?,
    );
    let server: SocketAddr = "127.0.0.1:53".parse().expect("literal address");
    let transport = SimTransport::new(sim.clone(), clock);
    let prober = Arc::new(Prober::new(
        server,
        transport,
        clock,
        limiter,
        settings.probe_config(),
        (scenario.sim.seed as u16).wrapping_mul(7919),
    ));

    let true_rates = scenario.sim.true_rates();
    let domains: Vec<Name> = if settings.domains.is_empty() {
        true_rates.keys().cloned().collect()
    } else {
        settings.domains.clone()
    };

    let mut errors: BTreeMap<Name, String> = BTreeMap::new();
    let mut max_ttls = settings.max_ttls.clone();
    if settings.method != Method::Timing {
        let missing: Vec<Name> = domains
            .iter()
            .filter(|d| !max_ttls.contains_key(*d))
            .cloned()
            .collect();
        for (d, r) in discover_all(prober.clone(), &missing, &settings.discovery()).await {
            match r {
                Ok(est) => {
                    max_ttls.insert(d, est.max_ttl);
                }
                Err(e) => {
                    errors.insert(d, e.to_string());
                }
            }
        }
    }

    let calibration = match (settings.method, &settings.calibration_domain) {
        (Method::Timing, Some(cal)) => Some(
            crate::snoop::calibrate_timing(
                &prober,
                cal,
                settings.calibration_samples,
                crate::snoop::DEFAULT_SEPARATION_FLOOR,
            )
            .await?,
        ),
        (Method::Timing, None) => {
            return Err(ScanError::Config("timing method needs calibration_domain".into()))
        }
        _ => None,
    };

    let deadline = clock.now() + settings.duration;
    let targets: Vec<(Name, SnoopPlan)> = domains
        .iter()
        .filter(|d| !errors.contains_key(*d))
        .map(|d| {
            let plan = SnoopPlan {
                method: settings.method,
                max_ttl: max_ttls.get(d).copied(),
                window_fraction: settings.window_fraction,
                deadline: Some(deadline),
                max_cycles: settings.max_cycles,
                discovery: settings.discovery(),
                calibration: calibration.clone(),
            };
            (d.clone(), plan)
        })
        .collect();
    let mut observations = Vec::new();
    let summaries = snoop_all(prober.clone(), targets, |item| match item {
        SnoopItem::Observation(o) => observations.push(o),
        SnoopItem::Error { domain, error, .. } => {
            log::debug!("{domain}: {error}");
        }
    })
    .await;
    for (d, s) in summaries {
        if let Some(e) = s.aborted {
            errors.insert(d, e.to_string());
        }
    }

    let agg = aggregate(&observations);
    let (estimates, _) = estimate_all(&agg, z, None)?;
    let by_domain: BTreeMap<&Name, &ArrivalEstimate> =
        estimates.iter().map(|e| (&e.domain, e)).collect();
    let rows = domains
        .iter()
        .map(|d| {
            let true_lambda = true_rates.get(d).copied().unwrap_or(0.0);
            let estimate = by_domain.get(d).map(|e| (*e).clone());
            BatchRow {
                domain: d.clone(),
                true_lambda,
                max_ttl: max_ttls.get(d).copied(),
                covered: estimate.as_ref().is_some_and(|e| e.covers(true_lambda)),
                estimate,
                error: errors.get(d).cloned(),
            }
        })
        .collect();
    Ok(BatchReport {
        rows,
        observations,
        queries_sent: prober.queries_sent(),
        started_at,
        finished_at: clock.now(),
    })
}

/// Plain-text table of a batch run.
pub fn batch_table(report: &BatchReport) -> String {
    let mut s = format!(
        "{:<28} {:>11} {:>11} {:>11} {:>6} {:>7} {}\n",
        "domain", "true_lambda", "lambda_hat", "+/-", "events", "covered", "note"
    );
    for r in &report.rows {
        let (lh, b, ev) = match &r.estimate {
            Some(e) => (
                format!("{:.4e}", e.lambda_hat),
                format!("{:.4e}", e.ci_half_width),
                e.events.to_string(),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        s += &format!(
            "{:<28} {:>11.4e} {:>11} {:>11} {:>6} {:>7} {}\n",
            r.domain.to_string(),
            r.true_lambda,
            lh,
            b,
            ev,
            if r.covered { "yes" } else { "no" },
            r.error.as_deref().unwrap_or("")
        );
    }
    let (c, n) = report.coverage();
    s += &format!("coverage {c}/{n}, queries sent {}\n", report.queries_sent);
    s.lines().map(str::trim_end).collect::<Vec<_>>().join("\n") + "\n"
}
