//! Time source shared by probes and the simulator.
//!
//! Everything reads time through [`Clock`], which is backed by tokio's timer.
//! On a runtime started with paused time the clock is virtual: it only moves
//! when every task is waiting on a timer, so multi-day scans finish in moments
//! and replay identically.

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use tokio::runtime::{Builder, Runtime};
use tokio::time::Instant;

/// Seconds since an arbitrary epoch, as `f64`.
pub type Timestamp = f64;

#[derive(Debug, Clone, Copy)]
pub struct Clock {
    origin: Instant,
    epoch: Timestamp,
}

impl Clock {
    /// A clock reading `epoch` now. Must be called inside a runtime.
    pub fn starting_at(epoch: Timestamp) -> Clock {
        Clock {
            origin: Instant::now(),
            epoch,
        }
    }

    /// A clock aligned to Unix time.
    pub fn unix() -> Clock {
        let epoch = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Clock::starting_at(epoch)
    }

    pub fn now(&self) -> Timestamp {
        self.epoch + self.origin.elapsed().as_secs_f64()
    }

    pub async fn sleep_until(&self, at: Timestamp) {
        // The timer wheel rounds deadlines, so nudge until we are really past `at`.
        while self.now() < at {
            let offset = (at - self.epoch).max(0.0);
            let deadline = self.origin + Duration::from_secs_f64(offset) + Duration::from_micros(1);
            tokio::time::sleep_until(deadline).await;
        }
    }

    pub async fn sleep(&self, secs: f64) {
        if secs > 0.0 {
            tokio::time::sleep(Duration::from_secs_f64(secs)).await;
        }
    }
}

/// Single-threaded runtime on virtual time.
pub fn virtual_runtime() -> Runtime {
    Builder::new_current_thread()
        .enable_time()
        .start_paused(true)
        .build()
        .expect("build virtual-time runtime")
}

/// Runtime on wall-clock time with networking enabled.
pub fn realtime_runtime() -> std::io::Result<Runtime> {
    Builder::new_multi_thread().worker_threads(2).enable_all().build()
}
