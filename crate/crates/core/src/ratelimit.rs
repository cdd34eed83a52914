//! Per-server query pacing.

use thiserror::Error;
use tokio::sync::{Mutex, RwLock, RwLockWriteGuard};

use crate::clock::{Clock, Timestamp};

#[derive(Debug, Error)]
#[error("rate must be a positive finite number of queries per second, got {0}")]
pub struct InvalidRate(pub f64);

/// Spaces sends at least `1 / rate` seconds apart, so no half-open one-second
/// window ever holds more than `rate` queries.
///
/// Ordinary probes share the budget; [`RateLimiter::exclusive`] hands the whole
/// budget to one task (RTT sampling must not queue behind other probes).
#[derive(Debug)]
pub struct RateLimiter {
    clock: Clock,
    interval: f64,
    next_free: Mutex<Timestamp>,
    gate: RwLock<()>,
}

pub struct Exclusive<'a> {
    limiter: &'a RateLimiter,
    _gate: RwLockWriteGuard<'a, ()>,
}

impl RateLimiter {
    pub fn new(rate_per_sec: f64, clock: Clock) -> Result<RateLimiter, InvalidRate> {
        if !(rate_per_sec.is_finite() && rate_per_sec > 0.0) {
            return Err(InvalidRate(rate_per_sec));
        }
        Ok(RateLimiter {
            clock,
            interval: 1.0 / rate_per_sec,
            next_free: Mutex::new(f64::NEG_INFINITY),
            gate: RwLock::new(()),
        })
    }

    pub fn rate(&self) -> f64 {
        1.0 / self.interval
    }

    /// Waits for a send slot and returns the send time.
    pub async fn acquire(&self) -> Timestamp {
        let _shared = self.gate.read().await;
        self.pace().await
    }

    /// Blocks every other user of this limiter until the guard is dropped.
    pub async fn exclusive(&self) -> Exclusive<'_> {
        Exclusive {
            limiter: self,
            _gate: self.gate.write().await,
        }
    }

    async fn pace(&self) -> Timestamp {
        let mut next = self.next_free.lock().await;
        self.clock.sleep_until(*next).await;
        let now = self.clock.now();
        *next = now + self.interval;
        now
    }
}

impl Exclusive<'_> {
    pub async fn acquire(&self) -> Timestamp {
        self.limiter.pace().await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::virtual_runtime;
    use std::sync::Arc;

    #[test]
    fn rejects_nonpositive_rate() {
        virtual_runtime().block_on(async {
            assert!(RateLimiter::new(0.0, Clock::starting_at(0.0)).is_err());
            assert!(RateLimiter::new(f64::NAN, Clock::starting_at(0.0)).is_err());
        });
    }

    #[test]
    fn concurrent_acquires_respect_cap() {
        let times = virtual_runtime().block_on(async {
            let clock = Clock::starting_at(0.0);
            let limiter = Arc::new(RateLimiter::new(10.0, clock).unwrap());
            let mut handles = Vec::new();
            for _ in 0..8 {
                let l = limiter.clone();
                handles.push(tokio::spawn(async move {
                    let mut v = Vec::new();
                    for _ in 0..25 {
                        v.push(l.acquire().await);
                    }
                    v
                }));
            }
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.await.unwrap());
            }
            all
        });
        let mut sorted = times.clone();
        sorted.sort_by(f64::total_cmp);
        for w in sorted.windows(11) {
            assert!(w[10] - w[0] >= 1.0, "11 sends inside one second");
        }
    }

    #[test]
    fn exclusive_holds_off_others() {
        virtual_runtime().block_on(async {
            let clock = Clock::starting_at(0.0);
            let limiter = Arc::new(RateLimiter::new(100.0, clock).unwrap());
            let guard = limiter.exclusive().await;
            let other = {
                let l = limiter.clone();
                tokio::spawn(async move { l.acquire().await })
            };
            let mut mine = Vec::new();
            for _ in 0..5 {
                mine.push(guard.acquire().await);
            }
            drop(guard);
            let theirs = other.await.unwrap();
            assert!(mine.iter().all(|&t| t < theirs));
        });
    }
}
