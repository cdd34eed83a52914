//! Probing state machines for the three snooping methods and for max-TTL
//! discovery.
//!
//! * `ttl_recursive`: wait for the record to expire, wait a further window `W`,
//!   then query. A remaining TTL below the maximum means someone else refreshed
//!   the record inside the window, and the shortfall says when. A full TTL means
//!   our own probe did the refresh, so the window is censored.
//! * `rd0`: non-recursive reads of cache state. A cached answer dates the last
//!   refresh without disturbing it; an empty answer means the record is absent.
//! * `timing`: like `ttl_recursive`, except the hit/miss decision comes from the
//!   response time alone.
//!
//! All waiting goes through the injected [`Clock`]; nothing here reads the wall
//! clock.

use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Timestamp};
use crate::ratelimit::{Exclusive, RateLimiter};
use crate::transport::{Transport, TransportError};
use crate::wire::{min_answer_ttl, DnsQuery, DnsResponse, Name, RecordType};

pub const DEFAULT_CONFIRMATIONS: u32 = 5;
/// Round-number TTL grids tried in order when snapping candidates.
pub const DEFAULT_TTL_GRID: [u32; 3] = [60, 15, 20];
pub const SNAP_TOLERANCE: u32 = 2;
/// Re-query this long after a predicted expiry during discovery.
pub const POST_EXPIRY_EPSILON: f64 = 1.0;
/// Discovery polls once a second over this many seconds before expiry.
const COUNTDOWN_POLLS: u32 = 10;
/// A refresh dated this far before the expected expiry can only come from the
/// server itself. Honest reads are never more than ~1 s early.
const PREFETCH_LEAD: f64 = 2.0;
/// Consecutive RD=0 answers that look freshly fetched by our own probe before
/// we conclude the server recurses anyway.
const RD0_FRESH_STREAK: u32 = 3;
pub const DEFAULT_SEPARATION_FLOOR: f64 = 0.95;
pub const MIN_TIMING_SAMPLES: usize = 20;
/// Guard band around the timing threshold, as a fraction of the median gap.
pub const GUARD_BAND_FRACTION: f64 = 0.25;

/// Tolerance for "the probe read back the full TTL": max(2 s, 1% of M).
pub fn grace(max_ttl: u32) -> f64 {
    (0.01 * max_ttl as f64).max(2.0)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbeError {
    #[error("no response after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("response truncated")]
    Truncated,
    #[error("no answer for {domain} (rcode {rcode})")]
    NoAnswer { domain: Name, rcode: String },
    #[error("server refreshes {domain} before expiry (ttl {before} -> {after} with {expected_remaining:.1}s left)")]
    ServerPrefetches {
        domain: Name,
        before: u32,
        after: u32,
        expected_remaining: f64,
    },
    #[error("ttl for {domain} does not count down ({before} -> {after} over {elapsed:.1}s)")]
    NonMonotonicTtl {
        domain: Name,
        before: u32,
        after: u32,
        elapsed: f64,
    },
    #[error("observed ttl {observed} exceeds max ttl {max_ttl}")]
    TtlExceedsMax { observed: u32, max_ttl: u32 },
    #[error("server recursed on RD=0 queries")]
    RdNotHonored,
    #[error("timing separation {quality:.3} below floor {floor:.3}")]
    InsufficientSeparation { quality: f64, floor: f64 },
    #[error("max ttl for {domain} unconfirmed after {rounds} rounds")]
    Unconfirmed { domain: Name, rounds: u32 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rd0,
    TtlRecursive,
    Timing,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Rd0 => "rd0",
            Method::TtlRecursive => "ttl_recursive",
            Method::Timing => "timing",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "rd0" => Ok(Method::Rd0),
            "ttl_recursive" => Ok(Method::TtlRecursive),
            "timing" => Ok(Method::Timing),
            _ => Err(format!("unknown method {s:?} (rd0, ttl_recursive, timing)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefreshEvent {
    pub delay_after_expiry: f64,
    pub inferred_refresh_time: Timestamp,
}

/// Outcome of one probe cycle for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshObservation {
    pub server: SocketAddr,
    pub domain: Name,
    pub method: Method,
    pub window_start: Timestamp,
    pub window_length: f64,
    pub event: Option<RefreshEvent>,
    pub probe_rtt_ms: f64,
    pub censored: bool,
    /// Send times of every query issued for this cycle, retries included.
    #[serde(default)]
    pub query_times: Vec<Timestamp>,
}

impl RefreshObservation {
    pub fn validate(&self) -> Result<(), &'static str> {
        if !self.window_start.is_finite() {
            return Err("window_start not finite");
        }
        if !(self.window_length.is_finite() && self.window_length > 0.0) {
            return Err("window_length must be > 0");
        }
        if self.censored == self.event.is_some() {
            return Err("exactly one of censored / event must hold");
        }
        if let Some(ev) = &self.event {
            if !(ev.delay_after_expiry >= 0.0 && ev.delay_after_expiry <= self.window_length) {
                return Err("event delay outside window");
            }
            if !ev.inferred_refresh_time.is_finite() {
                return Err("inferred_refresh_time not finite");
            }
        }
        Ok(())
    }

    /// Time this cycle contributes to the observed period.
    pub fn exposure(&self) -> f64 {
        match &self.event {
            Some(ev) => ev.delay_after_expiry,
            None => self.window_length,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub timeout: Duration,
    pub retries: u32,
    pub qtype: RecordType,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            timeout: Duration::from_secs(2),
            retries: 3,
            qtype: RecordType::A,
        }
    }
}

/// One answered probe.
#[derive(Debug, Clone)]
pub struct Reading {
    pub sent_at: Timestamp,
    pub rtt_ms: f64,
    pub response: DnsResponse,
    /// Minimum TTL over the answer chain, if there was one.
    pub ttl: Option<u32>,
}

/// A TTL read at a point in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtlReading {
    pub at: Timestamp,
    pub ttl: u32,
    pub rtt_ms: f64,
}

impl TtlReading {
    pub fn expiry(&self) -> Timestamp {
        self.at + self.ttl as f64
    }
}

/// Sends queries to one resolver through its rate limiter.
pub struct Prober<T> {
    server: SocketAddr,
    transport: T,
    clock: Clock,
    limiter: Arc<RateLimiter>,
    config: ProbeConfig,
    next_id: AtomicU32,
    sent: AtomicU64,
}

impl<T: Transport> Prober<T> {
    pub fn new(
        server: SocketAddr,
        transport: T,
        clock: Clock,
        limiter: Arc<RateLimiter>,
        config: ProbeConfig,
        id_seed: u16,
    ) -> Prober<T> {
        Prober {
            server,
            transport,
            clock,
            limiter,
            config,
            next_id: AtomicU32::new(id_seed as u32),
            sent: AtomicU64::new(0),
        }
    }

    pub fn server(&self) -> SocketAddr {
        self.server
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn limiter(&self) -> &RateLimiter {
        &self.limiter
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    /// Total queries put on the wire so far.
    pub fn queries_sent(&self) -> u64 {
        self.sent.load(Ordering::Relaxed)
    }

    fn fresh_id(&self) -> u16 {
        self.next_id.fetch_add(1, Ordering::Relaxed) as u16
    }

    /// Queries `domain`, retrying lost probes with fresh transaction ids. Send
    /// times are appended to `ledger`.
    pub async fn query(
        &self,
        domain: &Name,
        recursion_desired: bool,
        ledger: &mut Vec<Timestamp>,
    ) -> Result<Reading, ProbeError> {
        self.query_paced(domain, recursion_desired, ledger, None).await
    }

    /// Like [`Prober::query`] but inside an exclusive hold on the rate budget.
    pub async fn query_exclusive(
        &self,
        hold: &Exclusive<'_>,
        domain: &Name,
        recursion_desired: bool,
        ledger: &mut Vec<Timestamp>,
    ) -> Result<Reading, ProbeError> {
        self.query_paced(domain, recursion_desired, ledger, Some(hold)).await
    }

    async fn query_paced(
        &self,
        domain: &Name,
        recursion_desired: bool,
        ledger: &mut Vec<Timestamp>,
        hold: Option<&Exclusive<'_>>,
    ) -> Result<Reading, ProbeError> {
        let attempts = self.config.retries + 1;
        for _ in 0..attempts {
            let query = DnsQuery::new(
                self.fresh_id(),
                domain.clone(),
                self.config.qtype,
                recursion_desired,
            );
            let sent_at = match hold {
                Some(h) => h.acquire().await,
                None => self.limiter.acquire().await,
            };
            ledger.push(sent_at);
            self.sent.fetch_add(1, Ordering::Relaxed);
            match self
                .transport
                .exchange(self.server, &query, self.config.timeout)
                .await
            {
                Ok(ex) => {
                    if ex.response.truncated {
                        return Err(ProbeError::Truncated);
                    }
                    let ttl = min_answer_ttl(&ex.response, domain);
                    return Ok(Reading {
                        sent_at,
                        rtt_ms: ex.rtt_ms,
                        response: ex.response,
                        ttl,
                    });
                }
                Err(TransportError::Timeout) => {
                    log::debug!("{domain}: probe to {} timed out", self.server);
                }
                Err(e) => {
                    log::debug!("{domain}: probe to {} failed: {e}", self.server);
                    // Don't spin on immediate errors such as ICMP unreachable.
                    self.clock.sleep(self.config.timeout.as_secs_f64()).await;
                }
            }
        }
        Err(ProbeError::Timeout { attempts })
    }

    /// Recursive query that must come back with an answer TTL.
    pub async fn read_ttl(
        &self,
        domain: &Name,
        ledger: &mut Vec<Timestamp>,
    ) -> Result<TtlReading, ProbeError> {
        let r = self.query(domain, true, ledger).await?;
        ttl_of(domain, r)
    }
}

fn ttl_of(domain: &Name, r: Reading) -> Result<TtlReading, ProbeError> {
    match r.ttl {
        Some(ttl) => Ok(TtlReading {
            at: r.sent_at,
            ttl,
            rtt_ms: r.rtt_ms,
        }),
        None => Err(ProbeError::NoAnswer {
            domain: domain.clone(),
            rcode: r.response.rcode.to_string(),
        }),
    }
}

// ---------------------------------------------------------------------------
// RD behaviour

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdEvidence {
    pub query: Name,
    /// `None` when every attempt timed out.
    pub rcode: Option<String>,
    pub answers: usize,
    pub ttl: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdBehavior {
    pub server: SocketAddr,
    pub honors_rd0: bool,
    pub evidence: Vec<RdEvidence>,
}

/// Mints `count` unique names under a zone we control.
pub fn canary_names(zone: &Name, count: usize, nonce: u64) -> Vec<Name> {
    (0..count)
        .filter_map(|i| zone.prepend(&format!("snoop-{nonce:x}-{i}")).ok())
        .collect()
}

/// Sends RD=0 queries for names nobody else can have cached. A server honours
/// RD=0 iff none of the answered canaries came back with records.
pub async fn check_rd_behavior<T: Transport>(
    prober: &Prober<T>,
    canaries: &[Name],
) -> Result<RdBehavior, ProbeError> {
    if canaries.is_empty() {
        return Err(ProbeError::InvalidArgument("no canary domains".into()));
    }
    let mut evidence = Vec::with_capacity(canaries.len());
    let mut ledger = Vec::new();
    for canary in canaries {
        match prober.query(canary, false, &mut ledger).await {
            Ok(r) => evidence.push(RdEvidence {
                query: canary.clone(),
                rcode: Some(r.response.rcode.to_string()),
                answers: r.response.answers.len(),
                ttl: r.ttl,
            }),
            Err(ProbeError::Timeout { .. }) => evidence.push(RdEvidence {
                query: canary.clone(),
                rcode: None,
                answers: 0,
                ttl: None,
            }),
            Err(e) => return Err(e),
        }
    }
    let answered: Vec<_> = evidence.iter().filter(|e| e.rcode.is_some()).collect();
    if answered.is_empty() {
        log::warn!("{}: no canary got a response: {evidence:?}", prober.server());
        return Err(ProbeError::Timeout {
            attempts: prober.config().retries + 1,
        });
    }
    let honors_rd0 = answered.iter().all(|e| e.answers == 0);
    Ok(RdBehavior {
        server: prober.server(),
        honors_rd0,
        evidence,
    })
}

// ---------------------------------------------------------------------------
// Max-TTL discovery

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxTtlEstimate {
    pub server: SocketAddr,
    pub domain: Name,
    pub max_ttl: u32,
    pub confirmations: u32,
    pub confirmed: bool,
    /// Whether any sighting counted toward `max_ttl` was snapped up to the grid.
    pub snapped_to_grid: bool,
    /// Raw rolled-over readings and how often each was seen.
    pub candidates_seen: BTreeMap<u32, u32>,
}

/// Snaps `candidate` up to the first grid multiple at most `tolerance` above
/// it, trying grids in order. Returns the value and whether it moved.
pub fn snap_to_grid(candidate: u32, grid: &[u32], tolerance: u32) -> (u32, bool) {
    for &g in grid.iter().filter(|&&g| g > 0) {
        let up = candidate.div_ceil(g) * g;
        if up - candidate <= tolerance {
            return (up, up != candidate);
        }
    }
    (candidate, false)
}

/// Counts rolled-over TTL sightings until one value has been seen often enough.
#[derive(Debug, Clone)]
pub struct TtlConfirmer {
    required: u32,
    grid: Vec<u32>,
    tolerance: u32,
    counts: BTreeMap<u32, u32>,
    snapped: BTreeMap<u32, bool>,
    raw: BTreeMap<u32, u32>,
}

impl TtlConfirmer {
    pub fn new(required: u32, grid: &[u32], tolerance: u32) -> TtlConfirmer {
        TtlConfirmer {
            required: required.max(1),
            grid: grid.to_vec(),
            tolerance,
            counts: BTreeMap::new(),
            snapped: BTreeMap::new(),
            raw: BTreeMap::new(),
        }
    }

    /// Records one sighting; returns `(max_ttl, confirmations, snapped)` once
    /// some value reaches the required count.
    pub fn push(&mut self, candidate: u32) -> Option<(u32, u32, bool)> {
        if candidate == 0 {
            return None;
        }
        *self.raw.entry(candidate).or_default() += 1;
        let (value, moved) = snap_to_grid(candidate, &self.grid, self.tolerance);
        let count = self.counts.entry(value).or_default();
        *count += 1;
        let snapped = self.snapped.entry(value).or_default();
        *snapped |= moved;
        (*count >= self.required).then_some((value, *count, *snapped))
    }

    pub fn candidates_seen(&self) -> &BTreeMap<u32, u32> {
        &self.raw
    }

    /// The most-sighted value so far.
    pub fn leader(&self) -> Option<(u32, u32, bool)> {
        self.counts
            .iter()
            .max_by_key(|(v, c)| (**c, **v))
            .map(|(&v, &c)| (v, c, self.snapped[&v]))
    }
}

#[derive(Debug, Clone)]
pub struct DiscoveryOptions {
    pub required_confirmations: u32,
    pub grid: Vec<u32>,
    pub tolerance: u32,
    pub max_rounds: u32,
}

impl Default for DiscoveryOptions {
    fn default() -> Self {
        DiscoveryOptions {
            required_confirmations: DEFAULT_CONFIRMATIONS,
            grid: DEFAULT_TTL_GRID.to_vec(),
            tolerance: SNAP_TOLERANCE,
            max_rounds: DEFAULT_CONFIRMATIONS * 3,
        }
    }
}

/// Learns the TTL the server assigns to `domain` on refresh.
///
/// Each round polls the countdown once a second over the last few seconds,
/// then reads the rolled-over value one second after the predicted expiry. A
/// TTL that jumps up while the record should still be cached is the server
/// prefetching; a TTL that stands still is not a real countdown.
pub async fn discover_max_ttl<T: Transport>(
    prober: &Prober<T>,
    domain: &Name,
    opts: &DiscoveryOptions,
) -> Result<MaxTtlEstimate, ProbeError> {
    let mut confirmer = TtlConfirmer::new(opts.required_confirmations, &opts.grid, opts.tolerance);
    let mut ledger = Vec::new();
    let mut current = prober.read_ttl(domain, &mut ledger).await?;
    let estimate = |value, confirmations, snapped, confirmed, c: &TtlConfirmer| MaxTtlEstimate {
        server: prober.server(),
        domain: domain.clone(),
        max_ttl: value,
        confirmations,
        confirmed,
        snapped_to_grid: snapped,
        candidates_seen: c.candidates_seen().clone(),
    };

    for _round in 0..opts.max_rounds {
        let expiry = current.expiry();
        let polls = current.ttl.min(COUNTDOWN_POLLS);
        let mut prev = current;
        let mut rolled = None;
        for k in (0..=polls).rev() {
            prober
                .clock()
                .sleep_until(expiry + POST_EXPIRY_EPSILON - k as f64)
                .await;
            let read = prober.read_ttl(domain, &mut ledger).await?;
            let elapsed = read.at - prev.at;
            let expected_remaining = prev.ttl as f64 - elapsed;
            if read.ttl > prev.ttl {
                if expected_remaining >= 1.0 {
                    return Err(ProbeError::ServerPrefetches {
                        domain: domain.clone(),
                        before: prev.ttl,
                        after: read.ttl,
                        expected_remaining,
                    });
                }
                rolled = Some(read);
                break;
            }
            if read.ttl == prev.ttl && elapsed >= 1.0 {
                return Err(ProbeError::NonMonotonicTtl {
                    domain: domain.clone(),
                    before: prev.ttl,
                    after: read.ttl,
                    elapsed,
                });
            }
            prev = read;
        }
        match rolled {
            Some(read) => {
                current = read;
                if let Some((value, n, snapped)) = confirmer.push(read.ttl) {
                    return Ok(estimate(value, n, snapped, true, &confirmer));
                }
            }
            None => current = prev,
        }
    }
    if let Some((value, n, _)) = confirmer.leader() {
        log::warn!("{domain}: max ttl {value} seen only {n} times");
    }
    Err(ProbeError::Unconfirmed {
        domain: domain.clone(),
        rounds: opts.max_rounds,
    })
}

// ---------------------------------------------------------------------------
// TTL-with-recursion cycles

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CycleVerdict {
    /// Our own probe refreshed the record: nothing arrived inside the window.
    Censored,
    /// Someone refreshed the record `delay` seconds after expiry.
    Event { delay: f64 },
}

/// Interprets the TTL read `window` seconds after the predicted expiry.
pub fn classify_post_probe(
    max_ttl: u32,
    window: f64,
    post_ttl: u32,
    domain: &Name,
) -> Result<CycleVerdict, ProbeError> {
    let m = max_ttl as f64;
    let eps = grace(max_ttl);
    let t = post_ttl as f64;
    if t > m + eps {
        return Err(ProbeError::TtlExceedsMax {
            observed: post_ttl,
            max_ttl,
        });
    }
    if t >= m - eps {
        return Ok(CycleVerdict::Censored);
    }
    let delay = window - (m - t);
    if delay < -PREFETCH_LEAD {
        return Err(ProbeError::ServerPrefetches {
            domain: domain.clone(),
            before: 0,
            after: post_ttl,
            expected_remaining: -delay,
        });
    }
    Ok(CycleVerdict::Event {
        delay: delay.clamp(0.0, window),
    })
}

#[derive(Debug, Clone)]
pub struct CycleOutcome {
    pub observation: RefreshObservation,
    /// The post-probe reading, reusable as the next cycle's pre-probe.
    pub next: TtlReading,
}

fn check_window(max_ttl: u32, window: f64) -> Result<(), ProbeError> {
    if max_ttl == 0 || !(window > 0.0 && window <= max_ttl as f64) {
        return Err(ProbeError::InvalidArgument(format!(
            "window {window} must satisfy 0 < W <= max ttl {max_ttl}"
        )));
    }
    Ok(())
}

/// One cycle: learn the expiry, sleep through it plus `window`, read the TTL.
/// `previous` lets the last cycle's post-probe stand in for the pre-probe.
pub async fn run_cycle_ttl_recursive<T: Transport>(
    prober: &Prober<T>,
    domain: &Name,
    max_ttl: u32,
    window: f64,
    previous: Option<TtlReading>,
    ledger: &mut Vec<Timestamp>,
) -> Result<CycleOutcome, ProbeError> {
    check_window(max_ttl, window)?;
    let pre = match previous {
        Some(r) => r,
        None => prober.read_ttl(domain, ledger).await?,
    };
    if pre.ttl as f64 > max_ttl as f64 + grace(max_ttl) {
        return Err(ProbeError::TtlExceedsMax {
            observed: pre.ttl,
            max_ttl,
        });
    }
    let expiry = pre.expiry();
    prober.clock().sleep_until(expiry + window).await;
    let post = prober.read_ttl(domain, ledger).await?;
    let verdict = classify_post_probe(max_ttl, window, post.ttl, domain)?;
    let event = match verdict {
        CycleVerdict::Censored => None,
        CycleVerdict::Event { delay } => Some(RefreshEvent {
            delay_after_expiry: delay,
            inferred_refresh_time: expiry + delay,
        }),
    };
    Ok(CycleOutcome {
        observation: RefreshObservation {
            server: prober.server(),
            domain: domain.clone(),
            method: Method::TtlRecursive,
            window_start: expiry,
            window_length: window,
            censored: event.is_none(),
            event,
            probe_rtt_ms: post.rtt_ms,
            query_times: std::mem::take(ledger),
        },
        next: post,
    })
}

// ---------------------------------------------------------------------------
// RD=0 probing

/// Tracks one domain across RD=0 probes.
///
/// The observable exposure is the time the record sits uncached. A cached
/// answer dates its refresh; the exposure since the last accounted instant up
/// to that refresh closes with an event, and the next exposure starts when the
/// refreshed record expires. Answers repeating an already seen refresh (within
/// the grace) are dropped.
#[derive(Debug, Clone, Default)]
pub struct Rd0Tracker {
    exposure_start: Option<Timestamp>,
    last_refresh: Option<Timestamp>,
    fresh_streak: u32,
    ledger: Vec<Timestamp>,
}

impl Rd0Tracker {
    pub fn new() -> Rd0Tracker {
        Rd0Tracker::default()
    }
}

/// Sends one RD=0 probe. Returns `None` when the probe adds nothing new (a
/// duplicate sighting, or the very first probe of a domain).
pub async fn run_probe_rd0<T: Transport>(
    prober: &Prober<T>,
    domain: &Name,
    max_ttl: u32,
    tracker: &mut Rd0Tracker,
) -> Result<Option<RefreshObservation>, ProbeError> {
    let reading = prober.query(domain, false, &mut tracker.ledger).await?;
    apply_rd0_reading(
        prober.server(),
        domain,
        max_ttl,
        reading.sent_at,
        reading.ttl,
        reading.rtt_ms,
        tracker,
    )
}

/// Pure half of [`run_probe_rd0`].
pub fn apply_rd0_reading(
    server: SocketAddr,
    domain: &Name,
    max_ttl: u32,
    now: Timestamp,
    ttl: Option<u32>,
    rtt_ms: f64,
    tracker: &mut Rd0Tracker,
) -> Result<Option<RefreshObservation>, ProbeError> {
    let m = max_ttl as f64;
    let eps = grace(max_ttl);
    let make = |start: Timestamp, event: Option<RefreshEvent>, ledger: &mut Vec<Timestamp>| {
        RefreshObservation {
            server,
            domain: domain.clone(),
            method: Method::Rd0,
            window_start: start,
            window_length: now - start,
            censored: event.is_none(),
            event,
            probe_rtt_ms: rtt_ms,
            query_times: std::mem::take(ledger),
        }
    };
    match ttl {
        Some(t) => {
            if t as f64 > m + eps {
                return Err(ProbeError::TtlExceedsMax {
                    observed: t,
                    max_ttl,
                });
            }
            let refreshed = now - (m - t as f64);
            if tracker
                .last_refresh
                .is_some_and(|r| (r - refreshed).abs() <= eps)
            {
                return Ok(None);
            }
            if m - t as f64 <= eps {
                tracker.fresh_streak += 1;
                if tracker.fresh_streak >= RD0_FRESH_STREAK {
                    return Err(ProbeError::RdNotHonored);
                }
            } else {
                tracker.fresh_streak = 0;
            }
            tracker.last_refresh = Some(refreshed);
            let obs = tracker
                .exposure_start
                .filter(|&start| now > start)
                .map(|start| {
                    let span = now - start;
                    let delay = (refreshed - start).clamp(0.0, span);
                    make(
                        start,
                        Some(RefreshEvent {
                            delay_after_expiry: delay,
                            inferred_refresh_time: start + delay,
                        }),
                        &mut tracker.ledger,
                    )
                });
            tracker.exposure_start = Some(refreshed + m);
            Ok(obs)
        }
        None => {
            let obs = tracker
                .exposure_start
                .filter(|&start| now > start)
                .map(|start| make(start, None, &mut tracker.ledger));
            tracker.exposure_start = Some(now);
            Ok(obs)
        }
    }
}

// ---------------------------------------------------------------------------
// Timing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingCalibration {
    pub server: SocketAddr,
    pub cached_rtt_samples: Vec<f64>,
    pub miss_rtt_samples: Vec<f64>,
    pub threshold: f64,
    pub guard_band: f64,
    pub separation_quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingVerdict {
    Cached,
    Miss,
    Abstain,
}

fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl TimingCalibration {
    /// Threshold at the midpoint of the two medians; quality is the share of
    /// all samples on their own side of it.
    pub fn from_samples(
        server: SocketAddr,
        cached: Vec<f64>,
        miss: Vec<f64>,
        floor: f64,
    ) -> Result<TimingCalibration, ProbeError> {
        if cached.len() < MIN_TIMING_SAMPLES || miss.len() < MIN_TIMING_SAMPLES {
            return Err(ProbeError::InvalidArgument(format!(
                "timing calibration needs at least {MIN_TIMING_SAMPLES} samples of each kind"
            )));
        }
        let (mc, mm) = (median(&cached), median(&miss));
        let threshold = (mc + mm) / 2.0;
        let quality = if mm > mc {
            let right = cached.iter().filter(|&&r| r < threshold).count()
                + miss.iter().filter(|&&r| r > threshold).count();
            right as f64 / (cached.len() + miss.len()) as f64
        } else {
            0.0
        };
        if quality < floor {
            return Err(ProbeError::InsufficientSeparation { quality, floor });
        }
        Ok(TimingCalibration {
            server,
            guard_band: GUARD_BAND_FRACTION * (mm - mc),
            cached_rtt_samples: cached,
            miss_rtt_samples: miss,
            threshold,
            separation_quality: quality,
        })
    }
}

pub fn classify_timing(rtt_ms: f64, calibration: &TimingCalibration) -> TimingVerdict {
    if rtt_ms < calibration.threshold - calibration.guard_band {
        TimingVerdict::Cached
    } else if rtt_ms > calibration.threshold + calibration.guard_band {
        TimingVerdict::Miss
    } else {
        TimingVerdict::Abstain
    }
}

/// Samples cached RTTs (repeat queries for a record we just cached) and miss
/// RTTs (fresh names under `calibration_domain`), holding the server's whole
/// rate budget so our own probes don't queue behind each other.
pub async fn calibrate_timing<T: Transport>(
    prober: &Prober<T>,
    calibration_domain: &Name,
    samples: usize,
    floor: f64,
) -> Result<TimingCalibration, ProbeError> {
    if samples < MIN_TIMING_SAMPLES {
        return Err(ProbeError::InvalidArgument(format!(
            "samples must be >= {MIN_TIMING_SAMPLES}, got {samples}"
        )));
    }
    let hold = prober.limiter().exclusive().await;
    let mut ledger = Vec::new();
    let warm = prober
        .query_exclusive(&hold, calibration_domain, true, &mut ledger)
        .await?;
    let mut last = ttl_of(calibration_domain, warm)?;
    let mut cached = Vec::with_capacity(samples);
    let mut budget = samples * 3;
    while cached.len() < samples && budget > 0 {
        budget -= 1;
        let r = prober
            .query_exclusive(&hold, calibration_domain, true, &mut ledger)
            .await?;
        let read = ttl_of(calibration_domain, r)?;
        // A TTL that went up means this query re-fetched the record.
        if read.ttl <= last.ttl {
            cached.push(read.rtt_ms);
        }
        last = read;
    }
    let nonce = prober.fresh_id() as u64 ^ (prober.clock().now().to_bits() & 0xffff_ffff);
    let mut miss = Vec::with_capacity(samples);
    for name in canary_names(calibration_domain, samples, nonce) {
        if let Ok(r) = prober.query_exclusive(&hold, &name, true, &mut ledger).await {
            miss.push(r.rtt_ms);
        }
    }
    drop(hold);
    TimingCalibration::from_samples(prober.server(), cached, miss, floor)
}

/// A timing cycle. The answer TTL only schedules the probe; whether someone
/// refreshed the record inside the window is judged from the RTT. The refresh
/// delay is unobservable, so it is imputed at the middle of the window.
/// Returns `None` as the observation when the RTT falls in the guard band.
pub async fn run_cycle_timing<T: Transport>(
    prober: &Prober<T>,
    domain: &Name,
    window: f64,
    calibration: &TimingCalibration,
    previous: Option<TtlReading>,
    ledger: &mut Vec<Timestamp>,
) -> Result<(Option<RefreshObservation>, TtlReading), ProbeError> {
    if window.is_nan() || window <= 0.0 {
        return Err(ProbeError::InvalidArgument("window must be > 0".into()));
    }
    let pre = match previous {
        Some(r) => r,
        None => prober.read_ttl(domain, ledger).await?,
    };
    let expiry = pre.expiry();
    prober.clock().sleep_until(expiry + window).await;
    let post = {
        let hold = prober.limiter().exclusive().await;
        let r = prober.query_exclusive(&hold, domain, true, ledger).await?;
        ttl_of(domain, r)?
    };
    let event = match classify_timing(post.rtt_ms, calibration) {
        TimingVerdict::Abstain => {
            ledger.clear();
            return Ok((None, post));
        }
        TimingVerdict::Miss => None,
        TimingVerdict::Cached => Some(RefreshEvent {
            delay_after_expiry: window / 2.0,
            inferred_refresh_time: expiry + window / 2.0,
        }),
    };
    Ok((
        Some(RefreshObservation {
            server: prober.server(),
            domain: domain.clone(),
            method: Method::Timing,
            window_start: expiry,
            window_length: window,
            censored: event.is_none(),
            event,
            probe_rtt_ms: post.rtt_ms,
            query_times: std::mem::take(ledger),
        }),
        post,
    ))
}

// ---------------------------------------------------------------------------
// Per-domain driver

#[derive(Debug, Clone)]
pub struct SnoopPlan {
    pub method: Method,
    /// Required for `ttl_recursive` and `rd0`; discovered on demand otherwise.
    pub max_ttl: Option<u32>,
    /// W / M, in (0, 1].
    pub window_fraction: f64,
    pub deadline: Option<Timestamp>,
    pub max_cycles: Option<u64>,
    pub discovery: DiscoveryOptions,
    pub calibration: Option<TimingCalibration>,
}

impl SnoopPlan {
    pub fn new(method: Method, max_ttl: Option<u32>) -> SnoopPlan {
        SnoopPlan {
            method,
            max_ttl,
            window_fraction: 1.0,
            deadline: None,
            max_cycles: None,
            discovery: DiscoveryOptions::default(),
            calibration: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SnoopItem {
    Observation(RefreshObservation),
    Error {
        domain: Name,
        at: Timestamp,
        error: ProbeError,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SnoopSummary {
    pub cycles: u64,
    pub events: u64,
    pub censored: u64,
    pub discarded: u64,
    pub errors: u64,
    pub aborted: Option<ProbeError>,
}

struct Driver<'a, S> {
    domain: &'a Name,
    sink: &'a mut S,
    summary: SnoopSummary,
}

impl<S: FnMut(SnoopItem)> Driver<'_, S> {
    fn observed(&mut self, obs: RefreshObservation) {
        self.summary.cycles += 1;
        if obs.censored {
            self.summary.censored += 1;
        } else {
            self.summary.events += 1;
        }
        (self.sink)(SnoopItem::Observation(obs));
    }

    fn failed(&mut self, at: Timestamp, error: ProbeError) {
        self.summary.errors += 1;
        (self.sink)(SnoopItem::Error {
            domain: self.domain.clone(),
            at,
            error,
        });
    }

    fn discarded(&mut self) {
        self.summary.cycles += 1;
        self.summary.discarded += 1;
    }

    fn abort(mut self, at: Timestamp, error: ProbeError) -> SnoopSummary {
        self.failed(at, error.clone());
        self.summary.aborted = Some(error);
        self.summary
    }
}

/// Runs probe cycles for one domain until the time or cycle budget runs out,
/// handing observations (and per-cycle errors) to `sink` in order. Only a
/// prefetching server stops the run early.
pub async fn snoop_domain<T: Transport, S: FnMut(SnoopItem)>(
    prober: &Prober<T>,
    domain: &Name,
    plan: &SnoopPlan,
    sink: &mut S,
) -> SnoopSummary {
    let clock = *prober.clock();
    let mut d = Driver {
        domain,
        sink,
        summary: SnoopSummary::default(),
    };
    if !(plan.window_fraction > 0.0 && plan.window_fraction <= 1.0) {
        let e = ProbeError::InvalidArgument(format!(
            "window fraction {} outside (0, 1]",
            plan.window_fraction
        ));
        return d.abort(clock.now(), e);
    }
    let cycles_left = |s: &SnoopSummary| plan.max_cycles.is_none_or(|m| s.cycles < m);
    let before_deadline = |t: Timestamp| plan.deadline.is_none_or(|dl| t <= dl);
    if !cycles_left(&d.summary) {
        return d.summary;
    }

    let mut max_ttl = match plan.max_ttl {
        Some(m) => m,
        None if plan.method == Method::Timing => 0,
        None => match discover_max_ttl(prober, domain, &plan.discovery).await {
            Ok(est) => est.max_ttl,
            Err(e) => return d.abort(clock.now(), e),
        },
    };
    let window_for = |m: u32| plan.window_fraction * m as f64;

    match plan.method {
        Method::TtlRecursive => {
            let mut previous: Option<TtlReading> = None;
            let mut ledger = Vec::new();
            while cycles_left(&d.summary) {
                let window = window_for(max_ttl);
                if let Some(prev) = previous {
                    if !before_deadline(prev.expiry() + window) {
                        break;
                    }
                } else if !before_deadline(clock.now()) {
                    break;
                }
                match run_cycle_ttl_recursive(prober, domain, max_ttl, window, previous, &mut ledger)
                    .await
                {
                    Ok(outcome) => {
                        previous = Some(outcome.next);
                        d.observed(outcome.observation);
                    }
                    Err(e @ ProbeError::ServerPrefetches { .. }) => return d.abort(clock.now(), e),
                    Err(e @ ProbeError::TtlExceedsMax { .. }) => {
                        d.failed(clock.now(), e);
                        d.discarded();
                        previous = None;
                        match discover_max_ttl(prober, domain, &plan.discovery).await {
                            Ok(est) => max_ttl = est.max_ttl,
                            Err(e) => return d.abort(clock.now(), e),
                        }
                    }
                    Err(e) => {
                        d.failed(clock.now(), e);
                        d.discarded();
                        previous = None;
                        ledger.clear();
                        clock.sleep(window.min(60.0)).await;
                    }
                }
            }
        }
        Method::Rd0 => {
            let interval = window_for(max_ttl);
            let mut tracker = Rd0Tracker::new();
            let mut next_probe = clock.now();
            while cycles_left(&d.summary) && before_deadline(next_probe) {
                clock.sleep_until(next_probe).await;
                next_probe += interval;
                match run_probe_rd0(prober, domain, max_ttl, &mut tracker).await {
                    Ok(Some(obs)) => d.observed(obs),
                    Ok(None) => {}
                    Err(e @ ProbeError::RdNotHonored) => return d.abort(clock.now(), e),
                    Err(e @ ProbeError::TtlExceedsMax { .. }) => {
                        d.failed(clock.now(), e);
                        match discover_max_ttl(prober, domain, &plan.discovery).await {
                            Ok(est) => max_ttl = est.max_ttl,
                            Err(e) => return d.abort(clock.now(), e),
                        }
                    }
                    Err(e) => {
                        d.failed(clock.now(), e);
                        d.discarded();
                    }
                }
            }
        }
        Method::Timing => {
            let Some(cal) = plan.calibration.as_ref() else {
                let e = ProbeError::InvalidArgument("timing method needs a calibration".into());
                return d.abort(clock.now(), e);
            };
            let mut previous: Option<TtlReading> = None;
            let mut ledger = Vec::new();
            while cycles_left(&d.summary) {
                // Without a known maximum, take the largest TTL seen so far.
                if let Some(p) = previous {
                    max_ttl = max_ttl.max(p.ttl);
                }
                let window = window_for(max_ttl.max(1));
                match previous {
                    Some(p) if !before_deadline(p.expiry() + window) => break,
                    None if !before_deadline(clock.now()) => break,
                    _ => {}
                }
                match run_cycle_timing(prober, domain, window, cal, previous, &mut ledger).await {
                    Ok((Some(obs), next)) => {
                        previous = Some(next);
                        d.observed(obs);
                    }
                    Ok((None, next)) => {
                        previous = Some(next);
                        d.discarded();
                    }
                    Err(e) => {
                        d.failed(clock.now(), e);
                        d.discarded();
                        previous = None;
                        ledger.clear();
                        clock.sleep(window.min(60.0)).await;
                    }
                }
            }
        }
    }
    d.summary
}
