use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};

use snoopdns::clock::{realtime_runtime, Clock};
use snoopdns::corpus::{
    liveness_filter, load_domain_list, new_scan_id, read_observations, DomainList, LivenessOptions,
    ObservationLog, ObservationRecord,
};
use snoopdns::estimation::{aggregate, estimate_all, z_for_confidence};
use snoopdns::ratelimit::RateLimiter;
use snoopdns::report::{text_table, write_csv};
use snoopdns::scan::{batch_table, discover_all, run_batch, snoop_all, Scenario};
use snoopdns::sim::{build_sim, serve_udp, ClockMode};
use snoopdns::snoop::{
    calibrate_timing, canary_names, check_rd_behavior, DiscoveryOptions, MaxTtlEstimate, Method,
    ProbeConfig, Prober, SnoopItem, SnoopPlan, DEFAULT_SEPARATION_FLOOR,
};
use snoopdns::transport::UdpTransport;
use snoopdns::wire::Name;

use crate::settings::{parse_duration, usage, ReportOptions, ScanOptions, SimulateArgs};

/// Where max-TTL estimates for a log are kept.
pub fn max_ttl_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".maxttl.json");
    PathBuf::from(s)
}

fn load_max_ttls(path: &Path, server: SocketAddr) -> Result<BTreeMap<Name, MaxTtlEstimate>> {
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let list: Vec<MaxTtlEstimate> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(list
        .into_iter()
        .filter(|e| e.server == server && e.confirmed)
        .map(|e| (e.domain.clone(), e))
        .collect())
}

fn save_max_ttls(path: &Path, known: &BTreeMap<Name, MaxTtlEstimate>) -> Result<()> {
    let list: Vec<&MaxTtlEstimate> = known.values().collect();
    std::fs::write(path, serde_json::to_string_pretty(&list)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn load_list(opts: &ScanOptions) -> Result<DomainList> {
    let (list, summary) = load_domain_list(&opts.domains, opts.format)
        .with_context(|| format!("loading {}", opts.domains.display()))?;
    for (line, text) in &summary.invalid {
        log::warn!("{}:{line}: skipping invalid domain {text:?}", opts.domains.display());
    }
    if !summary.invalid.is_empty() || summary.duplicates > 0 {
        eprintln!(
            "domain list: {} entries, {} invalid skipped, {} duplicates dropped",
            list.len(),
            summary.invalid.len(),
            summary.duplicates
        );
    }
    Ok(list)
}

fn make_prober(opts: &ScanOptions, clock: Clock) -> Result<Arc<Prober<UdpTransport>>> {
    let limiter = Arc::new(RateLimiter::new(opts.rate, clock).map_err(|e| usage(e.to_string()))?);
    let config = ProbeConfig {
        timeout: Duration::from_secs_f64(opts.timeout),
        ..ProbeConfig::default()
    };
    let seed = opts.seed.unwrap_or_else(|| u64::from(std::process::id())) as u16;
    Ok(Arc::new(Prober::new(
        opts.server,
        UdpTransport,
        clock,
        limiter,
        config,
        seed,
    )))
}

fn discovery_options(opts: &ScanOptions) -> DiscoveryOptions {
    DiscoveryOptions {
        required_confirmations: opts.confirmations,
        max_rounds: opts.confirmations * 3,
        ..DiscoveryOptions::default()
    }
}

async fn live_domains(prober: &Prober<UdpTransport>, list: DomainList, opts: &ScanOptions) -> Result<Vec<Name>> {
    if opts.liveness_attempts == 0 || list.is_empty() {
        return Ok(list.domains().cloned().collect());
    }
    let lopts = LivenessOptions {
        attempts: opts.liveness_attempts,
        spacing: opts.liveness_spacing,
    };
    let (live, dead) = liveness_filter(prober, &list, lopts).await?;
    for d in dead.domains() {
        eprintln!("{d}: did not resolve to an address, skipped");
    }
    Ok(live.domains().cloned().collect())
}

pub fn discover_ttl(opts: ScanOptions) -> Result<()> {
    let list = load_list(&opts)?;
    let store = max_ttl_path(&opts.out);
    let rt = realtime_runtime().context("starting runtime")?;
    rt.block_on(async {
        let prober = make_prober(&opts, Clock::unix())?;
        let domains = live_domains(&prober, list, &opts).await?;
        let results = discover_all(prober.clone(), &domains, &discovery_options(&opts)).await;

        let mut known = load_max_ttls(&store, opts.server)?;
        let mut out = std::io::stdout().lock();
        writeln!(out, "{:<40} {:>8} {:>13} {:>7}  status", "domain", "max_ttl", "confirmations", "snapped")?;
        let mut failures = 0;
        for (domain, r) in &results {
            match r {
                Ok(est) => {
                    writeln!(
                        out,
                        "{:<40} {:>8} {:>13} {:>7}  ok",
                        domain.to_string(),
                        est.max_ttl,
                        est.confirmations,
                        est.snapped_to_grid
                    )?;
                    known.insert(domain.clone(), est.clone());
                }
                Err(e) => {
                    failures += 1;
                    writeln!(out, "{:<40} {:>8} {:>13} {:>7}  {e}", domain.to_string(), "-", "-", "-")?;
                }
            }
        }
        out.flush()?;
        save_max_ttls(&store, &known)?;
        if !results.is_empty() && failures == results.len() {
            bail!("max-TTL discovery failed for every domain");
        }
        Ok(())
    })
}

pub fn snoop(opts: ScanOptions) -> Result<()> {
    if opts.duration.is_none() && opts.max_cycles.is_none() {
        return Err(usage("snoop needs --duration or --max-cycles"));
    }
    if opts.method == Method::Timing && opts.calibration_domain.is_none() {
        return Err(usage("the timing method needs --calibration-domain"));
    }
    let list = load_list(&opts)?;
    let store = max_ttl_path(&opts.out);
    let rt = realtime_runtime().context("starting runtime")?;
    rt.block_on(async {
        let clock = Clock::unix();
        let prober = make_prober(&opts, clock)?;
        let domains = live_domains(&prober, list, &opts).await?;

        if opts.method == Method::Rd0 {
            match &opts.canary_zone {
                Some(zone) => {
                    let nonce = clock.now().to_bits();
                    let behavior = check_rd_behavior(&prober, &canary_names(zone, 5, nonce)).await?;
                    if !behavior.honors_rd0 {
                        bail!("{} recurses on RD=0 queries; use ttl_recursive instead", opts.server);
                    }
                }
                None => log::warn!("no --canary-zone given; assuming the server honours RD=0"),
            }
        }

        let calibration = match (&opts.method, &opts.calibration_domain) {
            (Method::Timing, Some(cal)) => {
                Some(calibrate_timing(&prober, cal, 50, DEFAULT_SEPARATION_FLOOR).await?)
            }
            _ => None,
        };

        let mut known = load_max_ttls(&store, opts.server)?;
        if opts.method != Method::Timing {
            let missing: Vec<Name> = domains.iter().filter(|d| !known.contains_key(*d)).cloned().collect();
            if !missing.is_empty() {
                eprintln!("discovering max TTL for {} domains", missing.len());
            }
            for (d, r) in discover_all(prober.clone(), &missing, &discovery_options(&opts)).await {
                match r {
                    Ok(est) => {
                        known.insert(d, est);
                    }
                    Err(e) => eprintln!("{d}: {e}"),
                }
            }
            save_max_ttls(&store, &known)?;
        }

        if let (Some(dur), Some(min_ttl)) = (opts.duration, known.values().map(|e| e.max_ttl).min()) {
            if dur < min_ttl as f64 {
                log::warn!("duration {dur}s is shorter than one TTL ({min_ttl}s); no cycle can complete");
                eprintln!("warning: duration shorter than one TTL; expect zero complete cycles");
            }
        }

        let deadline = opts.duration.map(|d| clock.now() + d);
        let targets: Vec<(Name, SnoopPlan)> = domains
            .iter()
            .filter(|d| opts.method == Method::Timing || known.contains_key(*d))
            .map(|d| {
                let plan = SnoopPlan {
                    method: opts.method,
                    max_ttl: known.get(d).map(|e| e.max_ttl),
                    window_fraction: opts.window_fraction,
                    deadline,
                    max_cycles: opts.max_cycles,
                    discovery: discovery_options(&opts),
                    calibration: calibration.clone(),
                };
                (d.clone(), plan)
            })
            .collect();

        let log = ObservationLog::open(&opts.out)?;
        let scan_id = new_scan_id(clock.now());
        let mut write_error = None;
        let (mut events, mut censored, mut errors) = (0u64, 0u64, 0u64);
        let summaries = snoop_all(prober.clone(), targets, |item| match item {
            SnoopItem::Observation(o) => {
                if o.censored {
                    censored += 1;
                } else {
                    events += 1;
                }
                let rec = ObservationRecord::new(scan_id.clone(), o);
                if let Err(e) = log.append([&rec]) {
                    write_error.get_or_insert(e);
                }
            }
            SnoopItem::Error { domain, error, .. } => {
                errors += 1;
                log::warn!("{domain}: {error}");
            }
        })
        .await;
        if let Some(e) = write_error {
            return Err(e.into());
        }
        for (d, s) in &summaries {
            if let Some(e) = &s.aborted {
                eprintln!("{d}: aborted: {e}");
            }
        }
        println!(
            "scan {scan_id}: {} domains, {} queries sent, {events} events, {censored} censored cycles, {errors} errors",
            summaries.len(),
            prober.queries_sent()
        );
        println!("log: {}", opts.out.display());
        Ok(())
    })
}

pub fn report(opts: ReportOptions) -> Result<()> {
    let (records, corrupt) =
        read_observations(&opts.log).with_context(|| format!("reading {}", opts.log.display()))?;
    if corrupt > 0 {
        eprintln!("{}: skipped {corrupt} corrupt lines", opts.log.display());
    }
    if records.is_empty() {
        bail!("{}: log contains no observations", opts.log.display());
    }
    let agg = aggregate(records.iter().map(|r| &r.observation));
    if agg.skipped > 0 {
        eprintln!("skipped {} invalid observations", agg.skipped);
    }
    let z = z_for_confidence(opts.confidence).map_err(|e| usage(e.to_string()))?;
    let (rows, _) = estimate_all(&agg, z, opts.top)?;
    if let Some(path) = &opts.csv {
        let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_csv(file, &rows)?;
    }
    let mut out = std::io::stdout().lock();
    if opts.csv_stdout {
        write_csv(&mut out, &rows)?;
    } else {
        out.write_all(text_table(&rows).as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.scenario)
        .with_context(|| format!("reading {}", args.scenario.display()))?;
    let mut scenario = Scenario::from_json(&text).map_err(|e| usage(e.to_string()))?;
    if let Some(seed) = args.seed {
        scenario.sim.seed = seed;
    }
    match scenario.sim.clock_mode {
        ClockMode::Virtual => {
            let report = run_batch(&scenario).map_err(|e| match e {
                snoopdns::scan::ScanError::Config(m) => usage(m),
                other => other.into(),
            })?;
            if let Some(out) = &args.out {
                let log = ObservationLog::open(out)?;
                let scan_id = format!("sim-{}", scenario.sim.seed);
                let recs: Vec<ObservationRecord> = report
                    .observations
                    .iter()
                    .map(|o| ObservationRecord::new(scan_id.clone(), o.clone()))
                    .collect();
                log.append(&recs)?;
            }
            if args.json {
                println!("{}", serde_json::to_string_pretty(&report.rows)?);
            } else {
                print!("{}", batch_table(&report));
            }
            Ok(())
        }
        ClockMode::Realtime => {
            let bind = args
                .bind
                .or(scenario.bind)
                .unwrap_or_else(|| "127.0.0.1:5353".parse().expect("literal address"));
            let serve_for = args.serve_for.as_deref().map(parse_duration).transpose()?;
            let rt = realtime_runtime().context("starting runtime")?;
            rt.block_on(async {
                let sim = build_sim(scenario.sim.clone())?;
                let server = serve_udp(sim, bind).await?;
                println!("listening on {}", server.local_addr);
                std::io::stdout().flush()?;
                match serve_for {
                    Some(secs) => tokio::time::sleep(Duration::from_secs_f64(secs)).await,
                    None => tokio::signal::ctrl_c().await?,
                }
                server.shutdown();
                Ok(())
            })
        }
    }
}
