//! DNS cache snooping toolkit.
//!
//! Probes a caching resolver to infer when records were refreshed by its
//! other users, turns those observations into per-domain arrival-rate
//! estimates, and ships a resolver simulator that serves as ground truth.

pub mod clock;
pub mod corpus;
pub mod estimation;
pub mod ratelimit;
pub mod report;
pub mod scan;
pub mod sim;
pub mod snoop;
pub mod transport;
pub mod wire;
