//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::test_runner::{Config, TestCaseError, TestRunner};

use snoopdns::clock::{realtime_runtime, virtual_runtime, Clock};
use snoopdns::estimation::{aggregate, estimate_all, spearman, Z_95};
use snoopdns::ratelimit::RateLimiter;
use snoopdns::report::csv_string;
use snoopdns::scan::{run_batch, Scenario, ScanSettings};
use snoopdns::sim::{
    build_sim, serve_udp, Anomaly, ArrivalProcess, ClientPopulation, RdPolicy, RttModel,
    SimConfig, SimTransport, ZoneConfig,
};
use snoopdns::snoop::*;
use snoopdns::transport::{Transport, UdpTransport};
use snoopdns::wire::{decode_query, decode_response, encode_query, encode_response, DnsQuery, Name};

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn name(s: &str) -> Name {
    Name::parse(s).unwrap()
}

fn wildcard_zone(zone: &str, ttl: u32) -> SimConfig {
    let mut z = BTreeMap::new();
    z.insert(
        name(zone),
        ZoneConfig {
            address: "192.0.2.10".parse().unwrap(),
            ttl,
        },
    );
    SimConfig::new(z)
}

fn client(domain: &str, process: ArrivalProcess) -> ClientPopulation {
    ClientPopulation {
        domain: name(domain),
        process,
        label: String::new(),
    }
}

fn sim_prober(cfg: SimConfig, rate: f64) -> Prober<SimTransport> {
    let sim = build_sim(cfg).unwrap();
    let clock = Clock::starting_at(0.0);
    let limiter = Arc::new(RateLimiter::new(rate, clock).unwrap());
    let server: SocketAddr = "127.0.0.1:53".parse().unwrap();
    Prober::new(
        server,
        SimTransport::new(sim, clock),
        clock,
        limiter,
        ProbeConfig::default(),
        11,
    )
}

async fn drive<T: Transport>(
    p: &Prober<T>,
    domain: &Name,
    plan: &SnoopPlan,
) -> (Vec<RefreshObservation>, SnoopSummary) {
    let mut obs = Vec::new();
    let summary = snoop_domain(p, domain, plan, &mut |item| {
        if let SnoopItem::Observation(o) = item {
            obs.push(o);
        }
    })
    .await;
    (obs, summary)
}

fn lambda_recovery() -> Outcome {
    let started = Instant::now();
    let mut cfg = wildcard_zone("example.com", 300);
    cfg.seed = 2024;
    let (lo, hi) = (-4.0f64, -1.5f64);
    for i in 0..20 {
        let lambda = 10f64.powf(lo + (hi - lo) * i as f64 / 19.0);
        cfg.clients.push(client(
            &format!("d{i:02}.example.com"),
            ArrivalProcess::Poisson { lambda },
        ));
    }
    let scenario = Scenario {
        sim: cfg,
        scan: Some(ScanSettings::new(48.0 * 3600.0)),
        bind: None,
    };
    let report = match run_batch(&scenario) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("scan failed: {e}")),
    };
    let elapsed = started.elapsed();
    let (truth, est): (Vec<f64>, Vec<f64>) = report
        .rows
        .iter()
        .map(|r| (r.true_lambda, r.estimate.as_ref().map_or(0.0, |e| e.lambda_hat)))
        .unzip();
    let rho = spearman(&truth, &est);
    let covered = report.rows.iter().filter(|r| r.covered).count();
    outcome(
        rho >= 0.95 && covered >= 18 && elapsed < Duration::from_secs(60),
        format!("spearman {rho:.4}, covered {covered}/20, wall {:.1}s", elapsed.as_secs_f64()),
    )
}

fn ci_coverage() -> Outcome {
    let started = Instant::now();
    let lambda = 0.005;
    let runs: Vec<u64> = (0..100).collect();
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).min(16);
    let results: Vec<(bool, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = runs
            .chunks(runs.len().div_ceil(threads))
            .map(|chunk| {
                s.spawn(move || {
                    chunk
                        .iter()
                        .map(|&seed| {
                            let mut cfg = wildcard_zone("example.com", 300);
                            cfg.seed = 1000 + seed;
                            cfg.clients
                                .push(client("www.example.com", ArrivalProcess::Poisson { lambda }));
                            let mut scan = ScanSettings::new(12.0 * 3600.0);
                            scan.max_ttls.insert(name("www.example.com"), 300);
                            let report = run_batch(&Scenario {
                                sim: cfg,
                                scan: Some(scan),
                                bind: None,
                            })
                            .unwrap();
                            let row = &report.rows[0];
                            let expected = row
                                .estimate
                                .as_ref()
                                .map_or(0.0, |e| lambda * e.observed_seconds);
                            (row.covered, expected)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    let elapsed = started.elapsed();
    let covered = results.iter().filter(|r| r.0).count();
    let min_expected = results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    outcome(
        covered >= 90 && min_expected >= 50.0 && elapsed < Duration::from_secs(120),
        format!(
            "covered {covered}/100, min expected events {min_expected:.1}, wall {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn formula_consistency() -> Outcome {
    let server: SocketAddr = "127.0.0.1:53".parse().unwrap();
    let obs: Vec<RefreshObservation> = (0..3000)
        .map(|i| {
            let start = i as f64 * 600.0;
            RefreshObservation {
                server,
                domain: name("radio.example"),
                method: Method::TtlRecursive,
                window_start: start,
                window_length: 300.0,
                event: Some(RefreshEvent {
                    delay_after_expiry: 150.0,
                    inferred_refresh_time: start + 150.0,
                }),
                probe_rtt_ms: 1.0,
                censored: false,
                query_times: vec![],
            }
        })
        .collect();
    let (ranked, _) = estimate_all(&aggregate(&obs), Z_95, None).unwrap();
    let csv = csv_string(&ranked);
    let row: Vec<&str> = csv.lines().nth(1).unwrap_or("").split(',').collect();
    let period_ok = row.get(4) == Some(&"150");
    let b: f64 = row.get(3).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN);
    let b_ok = ((b - 2.386e-4) / 2.386e-4).abs() <= 0.01;
    outcome(
        period_ok && b_ok,
        format!("period {:?}, b {b:.4e}", row.get(4).copied().unwrap_or("?")),
    )
}

fn max_ttl_discovery() -> Outcome {
    let mut found = Vec::new();
    let mut ok = true;
    for ttl in [15, 20, 60, 300, 3600] {
        let est = virtual_runtime().block_on(async {
            let p = sim_prober(wildcard_zone("example.com", ttl), 10.0);
            discover_max_ttl(&p, &name("www.example.com"), &DiscoveryOptions::default()).await
        });
        match est {
            Ok(e) => {
                ok &= e.max_ttl == ttl && e.confirmations >= 5 && e.confirmed;
                found.push(e.max_ttl.to_string());
            }
            Err(e) => {
                ok = false;
                found.push(format!("err({e})"));
            }
        }
    }
    let anomaly = Anomaly::PreRefresh {
        remaining_low: 3.0,
        remaining_high: 5.0,
    };
    // Unknown max TTL: discovery runs first.
    let (cycles_a, flagged_a) = virtual_runtime().block_on(async {
        let mut cfg = wildcard_zone("example.com", 300);
        cfg.anomaly = anomaly;
        cfg.clients.push(client("www.example.com", ArrivalProcess::Poisson { lambda: 0.01 }));
        let p = sim_prober(cfg, 10.0);
        let mut plan = SnoopPlan::new(Method::TtlRecursive, None);
        plan.max_cycles = Some(3);
        let (_, s) = drive(&p, &name("www.example.com"), &plan).await;
        (s.cycles, matches!(s.aborted, Some(ProbeError::ServerPrefetches { .. })))
    });
    // Known max TTL with a half-length window: cycles alone must catch it.
    let (cycles_b, flagged_b) = virtual_runtime().block_on(async {
        let mut cfg = wildcard_zone("example.com", 300);
        cfg.anomaly = anomaly;
        cfg.clients.push(client(
            "www.example.com",
            ArrivalProcess::Periodic {
                interval: 1.0,
                phase: None,
            },
        ));
        let p = sim_prober(cfg, 10.0);
        let mut plan = SnoopPlan::new(Method::TtlRecursive, Some(300));
        plan.window_fraction = 0.5;
        plan.max_cycles = Some(3);
        let (_, s) = drive(&p, &name("www.example.com"), &plan).await;
        (s.cycles, matches!(s.aborted, Some(ProbeError::ServerPrefetches { .. })))
    });
    ok &= flagged_a && flagged_b && cycles_a <= 3 && cycles_b <= 3;
    outcome(
        ok,
        format!(
            "discovered [{}]; prefetch flagged after {cycles_a} cycles (discovery) and {cycles_b} cycles (W=M/2)",
            found.join(", ")
        ),
    )
}

fn rd_behavior() -> Outcome {
    let mut correct = 0;
    for trial in 0..20u64 {
        let policy = if trial % 2 == 0 { RdPolicy::Honor } else { RdPolicy::Ignore };
        let got = virtual_runtime().block_on(async {
            let mut cfg = wildcard_zone("canary.example", 60);
            cfg.rd_policy = policy;
            cfg.seed = trial;
            cfg.clients.push(client(
                "www.canary.example",
                ArrivalProcess::Poisson { lambda: 0.1 },
            ));
            let p = sim_prober(cfg, 10.0);
            let canaries = canary_names(&name("canary.example"), 3, 0x5eed + trial);
            check_rd_behavior(&p, &canaries).await
        });
        if matches!(got, Ok(b) if b.honors_rd0 == (policy == RdPolicy::Honor)) {
            correct += 1;
        }
    }
    outcome(correct == 20, format!("{correct}/20 trials classified"))
}

fn timing_method() -> Outcome {
    let (accuracy, abstained) = virtual_runtime().block_on(async {
        let p = sim_prober(wildcard_zone("example.com", 3600), 50.0);
        let cal = match calibrate_timing(&p, &name("cal.example.com"), 50, DEFAULT_SEPARATION_FLOOR)
            .await
        {
            Ok(c) => c,
            Err(_) => return (0.0, 0),
        };
        let mut ledger = Vec::new();
        let (mut correct, mut abstained) = (0, 0);
        for i in 0..500 {
            let d = name(&format!("q{i}.example.com"));
            // First lookup recurses, the repeat is served from cache.
            for expect in [TimingVerdict::Miss, TimingVerdict::Cached] {
                let r = p.query(&d, true, &mut ledger).await.unwrap();
                match classify_timing(r.rtt_ms, &cal) {
                    TimingVerdict::Abstain => abstained += 1,
                    v if v == expect => correct += 1,
                    _ => {}
                }
            }
        }
        (correct as f64 / 1000.0, abstained)
    });
    let jitter = virtual_runtime().block_on(async {
        let mut cfg = wildcard_zone("example.com", 3600);
        cfg.rtt_model = RttModel {
            cached_mean: 5.0,
            cached_jitter: 40.0,
            recursion_extra_mean: 50.0,
            recursion_jitter: 40.0,
        };
        let p = sim_prober(cfg, 50.0);
        calibrate_timing(&p, &name("cal.example.com"), 50, DEFAULT_SEPARATION_FLOOR).await
    });
    let jitter_ok = matches!(jitter, Err(ProbeError::InsufficientSeparation { .. }));
    let jitter_desc = match &jitter {
        Err(e) => e.to_string(),
        Ok(c) => format!("calibrated with quality {:.3}", c.separation_quality),
    };
    outcome(
        accuracy >= 0.99 && jitter_ok,
        format!("accuracy {:.1}% ({abstained} abstained); jitter: {jitter_desc}", accuracy * 100.0),
    )
}

fn codec() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let round_trip = runner.run(&common::response(), |resp| {
        let back = decode_response(&encode_response(&resp)).map_err(|e| TestCaseError::fail(e.to_string()))?;
        if back != resp {
            return Err(TestCaseError::fail("response changed in round trip"));
        }
        let q = DnsQuery::new(resp.id, resp.question.map_or(Name::root(), |q| q.name), snoopdns::wire::RecordType::A, true);
        if decode_query(&encode_query(&q)).ok() != Some(q) {
            return Err(TestCaseError::fail("query changed in round trip"));
        }
        Ok(())
    });
    let fuzz = std::panic::catch_unwind(|| common::fuzz_decoders(100_000, 0xacce97));
    let fuzz_desc = match &fuzz {
        Ok(Ok(())) => "clean".to_string(),
        Ok(Err(e)) => e.clone(),
        Err(_) => "decoder panicked".to_string(),
    };
    outcome(
        round_trip.is_ok() && matches!(fuzz, Ok(Ok(()))),
        format!(
            "round trip {}; 100000 fuzzed packets {fuzz_desc}",
            match &round_trip {
                Ok(()) => "1000/1000".to_string(),
                Err(e) => e.to_string(),
            }
        ),
    )
}

fn zero_traffic() -> Outcome {
    let (events, cycles) = virtual_runtime().block_on(async {
        let p = sim_prober(wildcard_zone("example.com", 300), 10.0);
        let mut plan = SnoopPlan::new(Method::TtlRecursive, Some(300));
        plan.max_cycles = Some(100);
        let (_, s) = drive(&p, &name("nobody.example.com"), &plan).await;
        (s.events, s.cycles)
    });
    outcome(events == 0 && cycles == 100, format!("{events} events in {cycles} cycles"))
}

const REALTIME_SCAN_SECS: f64 = 300.0;

fn end_to_end_realtime() -> Outcome {
    let rt = match realtime_runtime() {
        Ok(rt) => rt,
        Err(e) => return outcome(false, format!("runtime: {e}")),
    };
    rt.block_on(async {
        let mut cfg = wildcard_zone("example.com", 10);
        cfg.clients.push(client(
            "www.example.com",
            ArrivalProcess::Periodic {
                interval: 20.0,
                phase: None,
            },
        ));
        let server = match serve_udp(build_sim(cfg).unwrap(), "127.0.0.1:0".parse().unwrap()).await {
            Ok(s) => s,
            Err(e) => return outcome(false, format!("bind: {e}")),
        };
        let clock = Clock::starting_at(0.0);
        let limiter = Arc::new(RateLimiter::new(10.0, clock).unwrap());
        let p = Prober::new(
            server.local_addr,
            UdpTransport,
            clock,
            limiter,
            ProbeConfig::default(),
            5,
        );
        let mut plan = SnoopPlan::new(Method::TtlRecursive, None);
        plan.deadline = Some(REALTIME_SCAN_SECS);
        let domain = name("www.example.com");
        let (obs, summary) = drive(&p, &domain, &plan).await;
        server.shutdown();
        let (ranked, _) = match estimate_all(&aggregate(&obs), Z_95, None) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("estimation: {e}")),
        };
        let lambda_hat = ranked.first().map_or(0.0, |e| e.lambda_hat);
        let rel = (lambda_hat - 0.05).abs() / 0.05;
        outcome(
            rel <= 0.2,
            format!(
                "lambda_hat {lambda_hat:.4}/s vs 0.05/s ({:.0}% off); {} cycles, {} events, {} censored",
                rel * 100.0,
                summary.cycles,
                summary.events,
                summary.censored
            ),
        )
    })
}

fn main() -> ExitCode {
    // The realtime check needs five wall-clock minutes; run it alongside the rest.
    let realtime = std::thread::spawn(end_to_end_realtime);
    let checks: [(&str, Check); 8] = [
        ("lambda-recovery", lambda_recovery),
        ("ci-coverage", ci_coverage),
        ("formula-consistency", formula_consistency),
        ("max-ttl-discovery", max_ttl_discovery),
        ("rd-behavior", rd_behavior),
        ("timing-method", timing_method),
        ("codec", codec),
        ("zero-traffic", zero_traffic),
    ];
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    for (label, check) in checks {
        let o = check();
        println!("{} {label}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((label, o));
    }
    let o = realtime
        .join()
        .unwrap_or_else(|_| outcome(false, "panicked"));
    println!("{} end-to-end-realtime: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    results.push(("end-to-end-realtime", o));

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(l, _)| *l).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
