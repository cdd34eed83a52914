//! Per-domain arrival-rate estimates from observation streams.
//!
//! Each domain accumulates an event count and an observed time. Event cycles
//! contribute the delay until the first refresh; censored cycles contribute
//! their whole window with no event. The rate estimate is events over observed
//! time, with a normal-approximation interval on the Poisson count.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::clock::Timestamp;
use crate::snoop::RefreshObservation;
use crate::wire::Name;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimationError {
    #[error("no observed time for {0}")]
    NoObservation(Name),
    #[error("invalid input: {0}")]
    DomainError(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub domain: Name,
    pub events: u64,
    pub observed_seconds: f64,
    pub cycles: u64,
    pub first_seen: Option<Timestamp>,
    pub last_seen: Option<Timestamp>,
}

fn min_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    }
}

fn max_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, y) => x.or(y),
    }
}

impl DomainStats {
    pub fn new(domain: Name) -> DomainStats {
        DomainStats {
            domain,
            events: 0,
            observed_seconds: 0.0,
            cycles: 0,
            first_seen: None,
            last_seen: None,
        }
    }

    pub fn add(&mut self, obs: &RefreshObservation) {
        self.cycles += 1;
        if obs.event.is_some() {
            self.events += 1;
        }
        self.observed_seconds += obs.exposure();
        let end = obs.window_start + obs.window_length;
        self.first_seen = min_opt(self.first_seen, Some(obs.window_start));
        self.last_seen = max_opt(self.last_seen, Some(end));
    }

    /// Combines two shards of the same domain.
    pub fn merge(&mut self, other: &DomainStats) {
        self.events += other.events;
        self.observed_seconds += other.observed_seconds;
        self.cycles += other.cycles;
        self.first_seen = min_opt(self.first_seen, other.first_seen);
        self.last_seen = max_opt(self.last_seen, other.last_seen);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aggregate {
    pub stats: BTreeMap<Name, DomainStats>,
    /// Observations dropped for violating their invariants.
    pub skipped: u64,
}

impl Aggregate {
    pub fn add(&mut self, obs: &RefreshObservation) {
        if let Err(why) = obs.validate() {
            log::debug!("skipping observation for {}: {why}", obs.domain);
            self.skipped += 1;
            return;
        }
        self.stats
            .entry(obs.domain.clone())
            .or_insert_with(|| DomainStats::new(obs.domain.clone()))
            .add(obs);
    }

    pub fn merge(&mut self, other: &Aggregate) {
        self.skipped += other.skipped;
        for (domain, s) in &other.stats {
            match self.stats.get_mut(domain) {
                Some(mine) => mine.merge(s),
                None => {
                    self.stats.insert(domain.clone(), s.clone());
                }
            }
        }
    }
}

pub fn aggregate<'a>(observations: impl IntoIterator<Item = &'a RefreshObservation>) -> Aggregate {
    let mut agg = Aggregate::default();
    for obs in observations {
        agg.add(obs);
    }
    agg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalEstimate {
    pub domain: Name,
    pub lambda_hat: f64,
    pub ci_half_width: f64,
    pub mean_refresh_period: Option<f64>,
    /// 1-based; 0 until [`rank_domains`] assigns it.
    pub rank: usize,
    pub events: u64,
    pub observed_seconds: f64,
    pub cycles: u64,
}

impl ArrivalEstimate {
    pub fn covers(&self, lambda: f64) -> bool {
        (self.lambda_hat - lambda).abs() <= self.ci_half_width
    }
}

pub fn estimate(stats: &DomainStats) -> Result<ArrivalEstimate, EstimationError> {
    estimate_with_z(stats, Z_95)
}

pub fn estimate_with_z(stats: &DomainStats, z: f64) -> Result<ArrivalEstimate, EstimationError> {
    if !(z.is_finite() && z >= 0.0) {
        return Err(EstimationError::DomainError(format!("z must be >= 0, got {z}")));
    }
    let o = stats.observed_seconds;
    if o.is_nan() || o <= 0.0 {
        return Err(EstimationError::NoObservation(stats.domain.clone()));
    }
    let t = stats.events as f64;
    let lambda_hat = t / o;
    Ok(ArrivalEstimate {
        domain: stats.domain.clone(),
        lambda_hat,
        ci_half_width: z * (lambda_hat / o).sqrt(),
        mean_refresh_period: (stats.events > 0).then(|| o / t),
        rank: 0,
        events: stats.events,
        observed_seconds: o,
        cycles: stats.cycles,
    })
}

/// Two-sided normal quantile for a confidence level in (0, 1).
pub fn z_for_confidence(confidence: f64) -> Result<f64, EstimationError> {
    use statrs::distribution::{ContinuousCDF, Normal};
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(EstimationError::DomainError(format!(
            "confidence must lie in (0, 1), got {confidence}"
        )));
    }
    if (confidence - 0.95).abs() < 1e-12 {
        return Ok(Z_95);
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(std.inverse_cdf(0.5 + confidence / 2.0))
}

/// `P(X = x)` for `X ~ Poisson(lambda)`.
pub fn poisson_pmf(lambda: f64, x: u64) -> Result<f64, EstimationError> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(EstimationError::DomainError(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return Ok(if x == 0 { 1.0 } else { 0.0 });
    }
    let x = x as f64;
    Ok((x * lambda.ln() - lambda - ln_gamma(x + 1.0)).exp())
}

fn rank_order(a: &ArrivalEstimate, b: &ArrivalEstimate) -> Ordering {
    b.lambda_hat
        .total_cmp(&a.lambda_hat)
        .then(b.observed_seconds.total_cmp(&a.observed_seconds))
        .then_with(|| a.domain.to_string().cmp(&b.domain.to_string()))
}

/// Sorts by descending rate (ties: more observed time, then name), numbers
/// the ranks from 1 and keeps the first `top_n`.
pub fn rank_domains(mut estimates: Vec<ArrivalEstimate>, top_n: Option<usize>) -> Vec<ArrivalEstimate> {
    estimates.sort_by(rank_order);
    if let Some(n) = top_n {
        estimates.truncate(n);
    }
    for (i, e) in estimates.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    estimates
}

/// Estimates every domain with observed time, ranked. Domains with none are
/// returned separately.
pub fn estimate_all(
    agg: &Aggregate,
    z: f64,
    top_n: Option<usize>,
) -> Result<(Vec<ArrivalEstimate>, Vec<Name>), EstimationError> {
    let mut out = Vec::new();
    let mut unobserved = Vec::new();
    for s in agg.stats.values() {
        match estimate_with_z(s, z) {
            Ok(e) => out.push(e),
            Err(EstimationError::NoObservation(d)) => unobserved.push(d),
            Err(e) => return Err(e),
        }
    }
    Ok((rank_domains(out, top_n), unobserved))
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}
