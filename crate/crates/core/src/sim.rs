//! Ground-truth simulator: an authoritative zone set behind a single caching
//! resolver, plus synthetic client populations querying through it.
//!
//! The simulator is a small discrete-event model. Client arrivals and cache
//! expiries sit in one time-ordered queue; probes are applied at the time they
//! arrive, after the queue has been drained up to that instant. Each client
//! population draws from its own seeded stream, so the client timeline does
//! not depend on how probes interleave.
//!
//! Zones answer for their apex and every name beneath it, which gives probes an
//! endless supply of uncached names (canaries, RTT calibration).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::UdpSocket;
use tokio::task::JoinHandle;

use crate::clock::{Clock, Timestamp};
use crate::transport::{Exchange, Transport, TransportError};
use crate::wire::{
    decode_query, encode_response, DnsQuery, DnsResponse, Name, Rcode, RecordType, ResourceRecord,
    CLASS_IN,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneConfig {
    pub address: IpAddr,
    /// TTL published by the authoritative server, in seconds.
    pub ttl: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RdPolicy {
    Honor,
    #[default]
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TtlPolicy {
    #[default]
    RespectAuthoritative,
    /// Cache every record for this many seconds regardless of the zone TTL.
    Override(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Anomaly {
    #[default]
    None,
    /// Any query that finds a record with remaining TTL inside
    /// `[remaining_low, remaining_high]` re-fetches it before answering.
    PreRefresh {
        remaining_low: f64,
        remaining_high: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    Poisson {
        lambda: f64,
    },
    Periodic {
        interval: f64,
        /// Time of the first arrival; defaults to one interval in.
        #[serde(default)]
        phase: Option<f64>,
    },
    None,
}

impl ArrivalProcess {
    /// Long-run arrivals per second.
    pub fn rate(&self) -> f64 {
        match *self {
            ArrivalProcess::Poisson { lambda } => lambda,
            ArrivalProcess::Periodic { interval, .. } => 1.0 / interval,
            ArrivalProcess::None => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPopulation {
    pub domain: Name,
    pub process: ArrivalProcess,
    #[serde(default)]
    pub label: String,
}

/// Gaussian RTTs in milliseconds, floored at [`MIN_RTT_MS`]. A recursive
/// lookup costs the cached RTT plus the recursion term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RttModel {
    pub cached_mean: f64,
    pub cached_jitter: f64,
    pub recursion_extra_mean: f64,
    pub recursion_jitter: f64,
}

pub const MIN_RTT_MS: f64 = 0.1;

impl Default for RttModel {
    fn default() -> Self {
        RttModel {
            cached_mean: 5.0,
            cached_jitter: 1.0,
            recursion_extra_mean: 50.0,
            recursion_jitter: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    #[default]
    Virtual,
    Realtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub zones: BTreeMap<Name, ZoneConfig>,
    #[serde(default)]
    pub rd_policy: RdPolicy,
    #[serde(default)]
    pub ttl_policy: TtlPolicy,
    #[serde(default)]
    pub anomaly: Anomaly,
    #[serde(default)]
    pub clients: Vec<ClientPopulation>,
    #[serde(default)]
    pub rtt_model: RttModel,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub clock_mode: ClockMode,
    /// Probability that a probe is silently dropped.
    #[serde(default)]
    pub loss_rate: f64,
}

impl SimConfig {
    pub fn new(zones: BTreeMap<Name, ZoneConfig>) -> SimConfig {
        SimConfig {
            zones,
            rd_policy: RdPolicy::default(),
            ttl_policy: TtlPolicy::default(),
            anomaly: Anomaly::default(),
            clients: Vec::new(),
            rtt_model: RttModel::default(),
            seed: 0,
            clock_mode: ClockMode::default(),
            loss_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        for (name, zone) in &self.zones {
            if zone.ttl == 0 {
                return bad(format!("zone {name}: authoritative ttl must be > 0"));
            }
        }
        if let TtlPolicy::Override(0) = self.ttl_policy {
            return bad("ttl override must be > 0".into());
        }
        if let Anomaly::PreRefresh {
            remaining_low,
            remaining_high,
        } = self.anomaly
        {
            if !(remaining_low >= 0.0 && remaining_low <= remaining_high) {
                return bad(format!(
                    "pre_refresh needs 0 <= remaining_low <= remaining_high, got [{remaining_low}, {remaining_high}]"
                ));
            }
        }
        let m = &self.rtt_model;
        for (what, v) in [
            ("cached_mean", m.cached_mean),
            ("cached_jitter", m.cached_jitter),
            ("recursion_extra_mean", m.recursion_extra_mean),
            ("recursion_jitter", m.recursion_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("rtt_model.{what} must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.loss_rate) {
            return bad("loss_rate must lie in [0, 1)".into());
        }
        for c in &self.clients {
            match c.process {
                ArrivalProcess::Poisson { lambda } if !(lambda.is_finite() && lambda >= 0.0) => {
                    return bad(format!("client {}: lambda must be >= 0", c.domain));
                }
                ArrivalProcess::Periodic { interval, phase }
                    if !(interval.is_finite() && interval > 0.0)
                        || phase.is_some_and(|p| !(p.is_finite() && p >= 0.0)) =>
                {
                    return bad(format!("client {}: interval must be > 0", c.domain));
                }
                _ => {}
            }
            if self.zone_for(&c.domain).is_none() {
                return bad(format!("client domain {} is not inside any zone", c.domain));
            }
        }
        Ok(())
    }

    fn zone_for(&self, name: &Name) -> Option<&ZoneConfig> {
        self.zones
            .iter()
            .filter(|(apex, _)| name.is_subdomain_of(apex))
            .max_by_key(|(apex, _)| apex.label_count())
            .map(|(_, z)| z)
    }

    /// Maximum TTL the resolver assigns to records of `zone`.
    pub fn served_ttl(&self, zone: &ZoneConfig) -> u32 {
        match self.ttl_policy {
            TtlPolicy::RespectAuthoritative => zone.ttl,
            TtlPolicy::Override(v) => v,
        }
    }

    /// True arrival rate per client domain.
    pub fn true_rates(&self) -> BTreeMap<Name, f64> {
        let mut out = BTreeMap::new();
        for c in &self.clients {
            *out.entry(c.domain.clone()).or_insert(0.0) += c.process.rate();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ClientQuery,
    CacheRefresh,
    ProbeQuery,
    Expiry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub at: Timestamp,
    pub kind: EventKind,
    pub domain: Name,
}

/// A simulated reply. `response` is `None` when the probe was lost.
#[derive(Debug, Clone)]
pub struct SimReply {
    pub response: Option<DnsResponse>,
    pub rtt_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum PendingKind {
    // Expiries sort first so a query at the exact expiry instant sees a miss.
    Expiry,
    Arrival,
}

#[derive(Debug)]
struct Pending {
    at: Timestamp,
    kind: PendingKind,
    seq: u64,
    // Client index for arrivals, cache generation for expiries.
    tag: u64,
    domain: Name,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    // Reversed: BinaryHeap is a max-heap and we want the earliest first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .total_cmp(&self.at)
            .then(other.kind.cmp(&self.kind))
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy)]
struct CacheEntry {
    expires_at: Timestamp,
    generation: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Lookup {
    Hit,
    Refreshed,
}

/// Whole seconds left, tolerant of the rounding in `(at + ttl) - at`.
fn remaining_ttl(expires_at: Timestamp, at: Timestamp) -> u32 {
    (expires_at - at + 1e-6).floor().max(0.0) as u32
}

pub struct Sim {
    config: SimConfig,
    now: Timestamp,
    cache: HashMap<Name, CacheEntry>,
    queue: BinaryHeap<Pending>,
    client_rngs: Vec<ChaCha8Rng>,
    rtt_rng: ChaCha8Rng,
    loss_rng: ChaCha8Rng,
    log: Vec<SimEvent>,
    seq: u64,
    generation: u64,
}

impl Sim {
    pub fn new(config: SimConfig) -> Result<Sim, SimError> {
        config.validate()?;
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(s);
            rng
        };
        let client_rngs = (0..config.clients.len())
            .map(|i| stream(i as u64 + 2))
            .collect();
        let mut sim = Sim {
            rtt_rng: stream(0),
            loss_rng: stream(1),
            client_rngs,
            config,
            now: 0.0,
            cache: HashMap::new(),
            queue: BinaryHeap::new(),
            log: Vec::new(),
            seq: 0,
            generation: 0,
        };
        for i in 0..sim.config.clients.len() {
            sim.schedule_arrival(i, 0.0, true);
        }
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn event_log(&self) -> &[SimEvent] {
        &self.log
    }

    /// Remaining TTL the resolver would report for `name` at the current time.
    pub fn cached_ttl(&self, name: &Name) -> Option<u32> {
        self.cache
            .get(name)
            .map(|e| remaining_ttl(e.expires_at, self.now))
    }

    fn push(&mut self, at: Timestamp, kind: PendingKind, tag: u64, domain: Name) {
        self.seq += 1;
        self.queue.push(Pending {
            at,
            kind,
            seq: self.seq,
            tag,
            domain,
        });
    }

    fn schedule_arrival(&mut self, idx: usize, after: Timestamp, first: bool) {
        let client = &self.config.clients[idx];
        let next = match client.process {
            ArrivalProcess::None => return,
            ArrivalProcess::Poisson { lambda } => {
                if lambda <= 0.0 {
                    return;
                }
                let gap: f64 = Exp::new(lambda)
                    .expect("lambda validated")
                    .sample(&mut self.client_rngs[idx]);
                after + gap
            }
            ArrivalProcess::Periodic { interval, phase } => {
                if first {
                    phase.unwrap_or(interval)
                } else {
                    after + interval
                }
            }
        };
        let domain = client.domain.clone();
        self.push(next, PendingKind::Arrival, idx as u64, domain);
    }

    /// Runs the event queue up to and including `to`; returns the new log entries.
    pub fn advance_to(&mut self, to: Timestamp) -> &[SimEvent] {
        let start = self.log.len();
        while self.queue.peek().is_some_and(|p| p.at <= to) {
            let p = self.queue.pop().expect("peeked");
            self.now = self.now.max(p.at);
            match p.kind {
                PendingKind::Expiry => {
                    if self.cache.get(&p.domain).is_some_and(|e| e.generation == p.tag) {
                        self.cache.remove(&p.domain);
                        self.record(p.at, EventKind::Expiry, p.domain);
                    }
                }
                PendingKind::Arrival => {
                    self.record(p.at, EventKind::ClientQuery, p.domain.clone());
                    self.resolve(&p.domain, p.at, true);
                    self.schedule_arrival(p.tag as usize, p.at, false);
                }
            }
        }
        self.now = self.now.max(to);
        &self.log[start..]
    }

    pub fn advance(&mut self, duration: f64) -> &[SimEvent] {
        let to = self.now + duration.max(0.0);
        self.advance_to(to)
    }

    fn record(&mut self, at: Timestamp, kind: EventKind, domain: Name) {
        self.log.push(SimEvent { at, kind, domain });
    }

    /// Looks `name` up in the cache at `at`, re-fetching when it is missing (and
    /// `recurse` allows it) or when the pre-refresh anomaly fires.
    fn resolve(&mut self, name: &Name, at: Timestamp, recurse: bool) -> Option<Lookup> {
        let zone = self.config.zone_for(name)?.clone();
        if let (Some(entry), Anomaly::PreRefresh { remaining_low, remaining_high }) =
            (self.cache.get(name), self.config.anomaly)
        {
            let remaining = entry.expires_at - at;
            if remaining >= remaining_low && remaining <= remaining_high {
                self.refresh(name, &zone, at);
                return Some(Lookup::Refreshed);
            }
        }
        if self.cache.contains_key(name) {
            Some(Lookup::Hit)
        } else if recurse {
            self.refresh(name, &zone, at);
            Some(Lookup::Refreshed)
        } else {
            None
        }
    }

    fn refresh(&mut self, name: &Name, zone: &ZoneConfig, at: Timestamp) {
        self.generation += 1;
        let expires_at = at + self.config.served_ttl(zone) as f64;
        self.cache.insert(
            name.clone(),
            CacheEntry {
                expires_at,
                generation: self.generation,
            },
        );
        self.push(expires_at, PendingKind::Expiry, self.generation, name.clone());
        self.record(at, EventKind::CacheRefresh, name.clone());
    }

    fn draw_rtt(&mut self, recursed: bool) -> f64 {
        let m = self.config.rtt_model;
        let gauss = |rng: &mut ChaCha8Rng, mean: f64, sd: f64| {
            Normal::new(mean, sd).map(|n| n.sample(rng)).unwrap_or(mean)
        };
        let mut rtt = gauss(&mut self.rtt_rng, m.cached_mean, m.cached_jitter);
        if recursed {
            rtt += gauss(&mut self.rtt_rng, m.recursion_extra_mean, m.recursion_jitter);
        }
        rtt.max(MIN_RTT_MS)
    }

    /// Answers one probe arriving at `at`.
    pub fn handle_query(&mut self, query: &DnsQuery, at: Timestamp) -> SimReply {
        let at = at.max(self.now);
        self.advance_to(at);
        if self.config.loss_rate > 0.0 && self.loss_rng.random::<f64>() < self.config.loss_rate {
            return SimReply {
                response: None,
                rtt_ms: 0.0,
            };
        }
        self.record(at, EventKind::ProbeQuery, query.qname.clone());

        let mut response = DnsResponse::reply_to(query);
        let Some(zone) = self.config.zone_for(&query.qname).cloned() else {
            response.rcode = Rcode::NXDOMAIN;
            return SimReply {
                response: Some(response),
                rtt_ms: self.draw_rtt(true),
            };
        };
        let wanted = match zone.address {
            IpAddr::V4(_) => RecordType::A,
            IpAddr::V6(_) => RecordType::AAAA,
        };
        if query.qclass != CLASS_IN || query.qtype != wanted {
            return SimReply {
                response: Some(response),
                rtt_ms: self.draw_rtt(false),
            };
        }
        let recurse = query.recursion_desired || self.config.rd_policy == RdPolicy::Ignore;
        let lookup = self.resolve(&query.qname, at, recurse);
        if lookup.is_some() {
            let entry = self.cache[&query.qname];
            let ttl = remaining_ttl(entry.expires_at, at);
            response
                .answers
                .push(ResourceRecord::address(query.qname.clone(), ttl, zone.address));
        }
        SimReply {
            response: Some(response),
            rtt_ms: self.draw_rtt(lookup == Some(Lookup::Refreshed)),
        }
    }

    pub fn export_log_jsonl(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        for e in &self.log {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub type SharedSim = Arc<Mutex<Sim>>;

pub fn build_sim(config: SimConfig) -> Result<SharedSim, SimError> {
    Ok(Arc::new(Mutex::new(Sim::new(config)?)))
}

/// In-process transport: probes reach the simulator at the clock's current
/// time and the caller waits out the simulated RTT.
#[derive(Clone)]
pub struct SimTransport {
    sim: SharedSim,
    clock: Clock,
}

impl SimTransport {
    pub fn new(sim: SharedSim, clock: Clock) -> SimTransport {
        SimTransport { sim, clock }
    }

    pub fn sim(&self) -> &SharedSim {
        &self.sim
    }
}

impl Transport for SimTransport {
    async fn exchange(
        &self,
        _server: SocketAddr,
        query: &DnsQuery,
        timeout: Duration,
    ) -> Result<Exchange, TransportError> {
        let at = self.clock.now();
        let reply = self.sim.lock().expect("sim lock").handle_query(query, at);
        match reply.response {
            Some(response) if reply.rtt_ms <= timeout.as_secs_f64() * 1e3 => {
                self.clock.sleep(reply.rtt_ms / 1e3).await;
                Ok(Exchange {
                    response,
                    rtt_ms: reply.rtt_ms,
                })
            }
            _ => {
                self.clock.sleep(timeout.as_secs_f64()).await;
                Err(TransportError::Timeout)
            }
        }
    }
}

/// A simulator answering real DNS packets.
pub struct SimServer {
    pub local_addr: SocketAddr,
    pub sim: SharedSim,
    task: JoinHandle<()>,
}

impl SimServer {
    pub fn shutdown(self) {
        self.task.abort();
    }

    pub async fn run_until_stopped(self) {
        let _ = self.task.await;
    }
}

/// Serves `sim` over UDP on `bind`, using wall-clock seconds since the call as
/// simulator time. Replies are delayed by the simulated RTT.
pub async fn serve_udp(sim: SharedSim, bind: SocketAddr) -> Result<SimServer, SimError> {
    let socket = UdpSocket::bind(bind)
        .await
        .map_err(|source| SimError::Bind { addr: bind, source })?;
    let local_addr = socket
        .local_addr()
        .map_err(|source| SimError::Bind { addr: bind, source })?;
    let socket = Arc::new(socket);
    let clock = Clock::starting_at(sim.lock().expect("sim lock").now());
    let shared = sim.clone();
    let task = tokio::spawn(async move {
        let mut buf = [0u8; 1500];
        loop {
            let (n, peer) = match socket.recv_from(&mut buf).await {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("sim server recv error: {e}");
                    continue;
                }
            };
            let query = match decode_query(&buf[..n]) {
                Ok(q) => q,
                Err(e) => {
                    log::debug!("ignoring bad query from {peer}: {e}");
                    continue;
                }
            };
            let reply = shared
                .lock()
                .expect("sim lock")
                .handle_query(&query, clock.now());
            let Some(response) = reply.response else {
                continue;
            };
            let packet = encode_response(&response);
            let socket = socket.clone();
            tokio::spawn(async move {
                tokio::time::sleep(Duration::from_secs_f64(reply.rtt_ms / 1e3)).await;
                if let Err(e) = socket.send_to(&packet, peer).await {
                    log::warn!("sim server send to {peer} failed: {e}");
                }
            });
        }
    });
    Ok(SimServer {
        local_addr,
        sim,
        task,
    })
}
