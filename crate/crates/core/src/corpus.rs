//! Domain lists and the JSONL observation log.

use std::collections::{BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::snoop::{Prober, ProbeError, RefreshObservation};
use crate::transport::Transport;
use crate::wire::{Name, Rcode};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_LIVENESS_ATTEMPTS: u32 = 3;
pub const DEFAULT_LIVENESS_SPACING: f64 = 60.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("resolver {0} unreachable")]
    ResolverUnreachable(SocketAddr),
    #[error("encoding observation: {0}")]
    Encode(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ListFormat {
    /// Header row with a `domain` column; optional `rank`/`globalrank` and
    /// `tags` (`;`-separated) columns.
    Csv,
    /// One domain per line, optionally followed by whitespace-separated tags.
    /// Blank lines and `#` comments are ignored.
    Plain,
}

impl FromStr for ListFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ListFormat::Csv),
            "plain" | "lines" => Ok(ListFormat::Plain),
            _ => Err(format!("unknown list format {s:?} (csv, plain)")),
        }
    }
}

impl ListFormat {
    /// Guesses from the file extension.
    pub fn for_path(path: &Path) -> ListFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ListFormat::Csv,
            _ => ListFormat::Plain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub domain: Name,
    pub source_rank: Option<u64>,
    pub tags: BTreeSet<String>,
}

impl DomainEntry {
    pub fn new(domain: Name) -> DomainEntry {
        DomainEntry {
            domain,
            source_rank: None,
            tags: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainList {
    pub entries: Vec<DomainEntry>,
    pub source: String,
}

impl DomainList {
    pub fn new(source: impl Into<String>) -> DomainList {
        DomainList {
            entries: Vec::new(),
            source: source.into(),
        }
    }

    /// Adds an entry unless the domain is already listed.
    pub fn push(&mut self, entry: DomainEntry) -> bool {
        if self.entries.iter().any(|e| e.domain == entry.domain) {
            return false;
        }
        self.entries.push(entry);
        true
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn domains(&self) -> impl Iterator<Item = &Name> {
        self.entries.iter().map(|e| &e.domain)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadSummary {
    /// `(line, text)` of every entry that was not a valid hostname.
    pub invalid: Vec<(u64, String)>,
    pub duplicates: usize,
}

struct Builder {
    list: DomainList,
    seen: HashSet<Name>,
    summary: LoadSummary,
}

impl Builder {
    fn add(&mut self, line: u64, raw: &str, rank: Option<u64>, tags: BTreeSet<String>) {
        let domain = match Name::parse(raw) {
            Ok(n) if n.is_hostname() => n,
            _ => {
                self.summary.invalid.push((line, raw.to_string()));
                return;
            }
        };
        if !self.seen.insert(domain.clone()) {
            self.summary.duplicates += 1;
            return;
        }
        self.list.entries.push(DomainEntry {
            domain,
            source_rank: rank,
            tags,
        });
    }
}

fn split_tags(s: &str, sep: impl Fn(char) -> bool) -> BTreeSet<String> {
    s.split(sep)
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

pub fn load_domain_list(path: &Path, format: ListFormat) -> Result<(DomainList, LoadSummary), CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_domain_list(BufReader::new(file), format, &path.display().to_string())
        .map_err(|e| match e {
            CorpusError::Io { source, .. } => io_err(path)(source),
            other => other,
        })
}

pub fn read_domain_list<R: BufRead>(
    input: R,
    format: ListFormat,
    source: &str,
) -> Result<(DomainList, LoadSummary), CorpusError> {
    let mut b = Builder {
        list: DomainList::new(source),
        seen: HashSet::new(),
        summary: LoadSummary::default(),
    };
    match format {
        ListFormat::Plain => {
            for (i, line) in input.lines().enumerate() {
                let line_no = i as u64 + 1;
                let line = line.map_err(|source| CorpusError::Io {
                    path: PathBuf::from(&b.list.source),
                    source,
                })?;
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (domain, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
                b.add(line_no, domain, None, split_tags(rest, char::is_whitespace));
            }
        }
        ListFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
            let parse_err = |e: csv::Error| CorpusError::Parse {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: e.to_string(),
            };
            let headers = rdr.headers().map_err(parse_err)?.clone();
            let column = |names: &[&str]| {
                headers
                    .iter()
                    .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
            };
            let domain_col = column(&["domain"]).ok_or(CorpusError::Parse {
                line: 1,
                message: "no domain column in header".into(),
            })?;
            let rank_col = column(&["rank", "globalrank", "global_rank"]);
            let tags_col = column(&["tags"]);
            for rec in rdr.records() {
                let rec = rec.map_err(parse_err)?;
                let line = rec.position().map(|p| p.line()).unwrap_or(0);
                let Some(domain) = rec.get(domain_col) else {
                    return Err(CorpusError::Parse {
                        line,
                        message: "missing domain field".into(),
                    });
                };
                let rank = match rank_col.and_then(|c| rec.get(c)).map(str::trim) {
                    None | Some("") => None,
                    Some(r) => match r.parse::<u64>() {
                        Ok(v) if v > 0 => Some(v),
                        _ => {
                            return Err(CorpusError::Parse {
                                line,
                                message: format!("rank {r:?} is not a positive integer"),
                            })
                        }
                    },
                };
                let tags = tags_col
                    .and_then(|c| rec.get(c))
                    .map(|t| split_tags(t, |c| c == ';'))
                    .unwrap_or_default();
                b.add(line, domain.trim(), rank, tags);
            }
        }
    }
    Ok((b.list, b.summary))
}

pub fn write_domain_list<W: Write>(out: W, list: &DomainList, format: ListFormat) -> io::Result<()> {
    match format {
        ListFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["rank", "domain", "tags"])?;
            for e in &list.entries {
                let tags: Vec<&str> = e.tags.iter().map(String::as_str).collect();
                w.write_record([
                    e.source_rank.map(|r| r.to_string()).unwrap_or_default(),
                    e.domain.to_string(),
                    tags.join(";"),
                ])?;
            }
            w.flush()
        }
        ListFormat::Plain => {
            let mut out = io::BufWriter::new(out);
            for e in &list.entries {
                write!(out, "{}", e.domain)?;
                for t in &e.tags {
                    write!(out, " {t}")?;
                }
                writeln!(out)?;
            }
            out.flush()
        }
    }
}

pub fn save_domain_list(path: &Path, list: &DomainList, format: ListFormat) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_domain_list(file, list, format).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Liveness

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LivenessOptions {
    pub attempts: u32,
    /// Minimum seconds between attempts on the same domain.
    pub spacing: f64,
}

impl Default for LivenessOptions {
    fn default() -> Self {
        LivenessOptions {
            attempts: DEFAULT_LIVENESS_ATTEMPTS,
            spacing: DEFAULT_LIVENESS_SPACING,
        }
    }
}

/// Splits `list` into domains that resolved to an address at least once and
/// those that never did. Fails outright if the resolver never answers in the
/// first round.
pub async fn liveness_filter<T: Transport>(
    prober: &Prober<T>,
    list: &DomainList,
    opts: LivenessOptions,
) -> Result<(DomainList, DomainList), CorpusError> {
    let n = list.entries.len();
    let mut alive = vec![false; n];
    let mut ledger = Vec::new();
    for round in 0..opts.attempts.max(1) {
        let started = prober.clock().now();
        let mut any_response = false;
        for (i, entry) in list.entries.iter().enumerate() {
            if alive[i] {
                continue;
            }
            ledger.clear();
            match prober.query(&entry.domain, true, &mut ledger).await {
                Ok(r) => {
                    any_response = true;
                    alive[i] = r.response.rcode == Rcode::NOERROR
                        && r.response.answers.iter().any(|rr| rr.ip_addr().is_some());
                }
                Err(ProbeError::Timeout { .. }) => {}
                Err(e) => {
                    any_response = true;
                    log::debug!("{}: liveness probe failed: {e}", entry.domain);
                }
            }
        }
        let pending = alive.iter().filter(|a| !**a).count();
        if round == 0 && !any_response && pending > 0 {
            return Err(CorpusError::ResolverUnreachable(prober.server()));
        }
        if pending == 0 || round + 1 == opts.attempts {
            break;
        }
        prober.clock().sleep_until(started + opts.spacing).await;
    }
    let mut live = DomainList::new(list.source.clone());
    let mut dead = DomainList::new(list.source.clone());
    for (entry, ok) in list.entries.iter().zip(alive) {
        if ok { &mut live } else { &mut dead }.entries.push(entry.clone());
    }
    Ok((live, dead))
}

// ---------------------------------------------------------------------------
// Observation log

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub schema_version: u32,
    pub scan_id: String,
    #[serde(flatten)]
    pub observation: RefreshObservation,
}

impl ObservationRecord {
    pub fn new(scan_id: impl Into<String>, observation: RefreshObservation) -> ObservationRecord {
        ObservationRecord {
            schema_version: SCHEMA_VERSION,
            scan_id: scan_id.into(),
            observation,
        }
    }
}

/// Append-only JSONL writer. Each record goes out in a single `write` on an
/// `O_APPEND` handle, so lines from concurrent writers never interleave.
pub struct ObservationLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl ObservationLog {
    pub fn open(path: &Path) -> Result<ObservationLog, CorpusError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(ObservationLog {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<'a>(
        &self,
        records: impl IntoIterator<Item = &'a ObservationRecord>,
    ) -> Result<usize, CorpusError> {
        let mut count = 0;
        for rec in records {
            let mut line = serde_json::to_vec(rec)?;
            line.push(b'\n');
            let mut file = self.file.lock().expect("log lock");
            file.write_all(&line).map_err(io_err(&self.path))?;
            file.flush().map_err(io_err(&self.path))?;
            count += 1;
        }
        Ok(count)
    }
}

pub fn append_observations<'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a ObservationRecord>,
) -> Result<usize, CorpusError> {
    ObservationLog::open(path)?.append(records)
}

/// Reads every parseable record; returns them with the number of lines that
/// were corrupt or carried an unknown schema version.
pub fn read_observations(path: &Path) -> Result<(Vec<ObservationRecord>, usize), CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut corrupt = 0;
    let mut reader = BufReader::new(file);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        let line = buf.trim_ascii();
        if line.is_empty() {
            continue;
        }
        match serde_json::from_slice::<ObservationRecord>(line) {
            Ok(r) if r.schema_version == SCHEMA_VERSION => records.push(r),
            _ => corrupt += 1,
        }
    }
    Ok((records, corrupt))
}

/// Scan identifier derived from the start time.
pub fn new_scan_id(at: Timestamp) -> String {
    format!("scan-{:.0}-{:04x}", at, std::process::id() & 0xffff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snoop::{Method, RefreshEvent};
    use proptest::prelude::*;
    use std::io::Cursor;

    fn plain(s: &str) -> (DomainList, LoadSummary) {
        read_domain_list(Cursor::new(s), ListFormat::Plain, "mem").unwrap()
    }

    #[test]
    fn plain_dedup_and_invalid() {
        let (l, s) = plain("a.com\na.com\nbad..name\n# comment\n\nB.com censored:CN popular\n");
        assert_eq!(l.len(), 2);
        assert_eq!(s.duplicates, 1);
        assert_eq!(s.invalid, vec![(3, "bad..name".to_string())]);
        assert_eq!(l.entries[1].domain.to_string(), "b.com");
        assert!(l.entries[1].tags.contains("censored:CN"));
    }

    #[test]
    fn csv_with_ranks() {
        let mut text = String::from("GlobalRank,TldRank,Domain,TLD\n");
        for i in 1..=1000 {
            text += &format!("{i},{i},site{i}.example,example\n");
        }
        let (l, s) = read_domain_list(Cursor::new(text), ListFormat::Csv, "mem").unwrap();
        assert_eq!(l.len(), 1000);
        assert!(s.invalid.is_empty());
        assert_eq!(l.entries[41].source_rank, Some(42));
    }

    #[test]
    fn csv_rank_errors_carry_line() {
        let text = "rank,domain\n1,a.com\nx,b.com\n";
        match read_domain_list(Cursor::new(text), ListFormat::Csv, "mem") {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = "rank,name\n1,a.com\n";
        assert!(matches!(
            read_domain_list(Cursor::new(text), ListFormat::Csv, "mem"),
            Err(CorpusError::Parse { line: 1, .. })
        ));
    }

    fn observation(i: u32) -> RefreshObservation {
        RefreshObservation {
            server: "127.0.0.1:53".parse().unwrap(),
            domain: Name::parse(&format!("d{i}.example")).unwrap(),
            method: Method::TtlRecursive,
            window_start: 1000.0 + i as f64,
            window_length: 300.0,
            event: i.is_multiple_of(2).then_some(RefreshEvent {
                delay_after_expiry: 12.5,
                inferred_refresh_time: 1012.5 + i as f64,
            }),
            probe_rtt_ms: 5.25,
            censored: i % 2 == 1,
            query_times: vec![1.0, 2.0],
        }
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.jsonl");
        let recs: Vec<_> = (0..3).map(|i| ObservationRecord::new("s1", observation(i))).collect();
        assert_eq!(append_observations(&path, &recs).unwrap(), 3);
        let (back, corrupt) = read_observations(&path).unwrap();
        assert_eq!((back, corrupt), (recs, 0));
    }

    #[test]
    fn corrupt_line_is_counted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.jsonl");
        let recs: Vec<_> = (0..2).map(|i| ObservationRecord::new("s1", observation(i))).collect();
        append_observations(&path, &recs[..1]).unwrap();
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"schema_version\": 1, \"scan\n")
            .unwrap();
        append_observations(&path, &recs[1..]).unwrap();
        let (back, corrupt) = read_observations(&path).unwrap();
        assert_eq!(back, recs);
        assert_eq!(corrupt, 1);
    }

    #[test]
    fn concurrent_writers_do_not_tear_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.jsonl");
        std::thread::scope(|s| {
            for w in 0..8 {
                let path = path.clone();
                s.spawn(move || {
                    let log = ObservationLog::open(&path).unwrap();
                    for i in 0..200 {
                        let rec = ObservationRecord::new(format!("w{w}"), observation(i));
                        log.append([&rec]).unwrap();
                    }
                });
            }
        });
        let (back, corrupt) = read_observations(&path).unwrap();
        assert_eq!(corrupt, 0);
        assert_eq!(back.len(), 1600);
    }

    #[test]
    fn prefix_of_log_reads_as_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.jsonl");
        let recs: Vec<_> = (0..5).map(|i| ObservationRecord::new("s", observation(i))).collect();
        append_observations(&path, &recs).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in (0..bytes.len()).step_by(37) {
            let p = dir.path().join("cut.jsonl");
            std::fs::write(&p, &bytes[..cut]).unwrap();
            let (back, _) = read_observations(&p).unwrap();
            assert_eq!(back[..], recs[..back.len()]);
        }
    }

    fn entry_strategy() -> impl Strategy<Value = DomainEntry> {
        (
            "[a-z][a-z0-9-]{0,10}\\.(com|org|example)",
            proptest::option::of(1u64..1_000_000),
            proptest::collection::btree_set("[a-zA-Z0-9:]{1,8}", 0..3),
        )
            .prop_map(|(d, rank, tags)| DomainEntry {
                domain: Name::parse(&d).unwrap(),
                source_rank: rank,
                tags,
            })
    }

    proptest! {
        #[test]
        fn csv_save_load_identity(entries in proptest::collection::vec(entry_strategy(), 0..30)) {
            let mut list = DomainList::new("mem");
            for e in entries {
                list.push(e);
            }
            let mut buf = Vec::new();
            write_domain_list(&mut buf, &list, ListFormat::Csv).unwrap();
            let (back, summary) = read_domain_list(Cursor::new(buf), ListFormat::Csv, "mem").unwrap();
            prop_assert_eq!(summary, LoadSummary::default());
            prop_assert_eq!(back, list);
        }

        #[test]
        fn plain_save_load_identity(entries in proptest::collection::vec(entry_strategy(), 0..30)) {
            let mut list = DomainList::new("mem");
            for mut e in entries {
                e.source_rank = None;
                list.push(e);
            }
            let mut buf = Vec::new();
            write_domain_list(&mut buf, &list, ListFormat::Plain).unwrap();
            let (back, _) = read_domain_list(Cursor::new(buf), ListFormat::Plain, "mem").unwrap();
            prop_assert_eq!(back, list);
        }
    }
}
