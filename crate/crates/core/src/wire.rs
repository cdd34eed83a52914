//! Minimal DNS wire format codec (RFC 1035 framing).
//!
//! Covers what cache snooping needs: single-question queries with control over
//! the RD bit, and responses whose answer TTLs we read back. Record types we do
//! not interpret are carried through as opaque rdata, and unknown rcodes are
//! kept as raw values so misbehaving servers can still be analysed.

use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const HEADER_LEN: usize = 12;
pub const MAX_LABEL_LEN: usize = 63;
pub const MAX_NAME_WIRE_LEN: usize = 255;
/// Largest TTL a record may carry; anything above is a protocol error.
pub const MAX_TTL: u32 = i32::MAX as u32;

const FLAG_QR: u16 = 0x8000;
const FLAG_AA: u16 = 0x0400;
const FLAG_TC: u16 = 0x0200;
const FLAG_RD: u16 = 0x0100;
const FLAG_RA: u16 = 0x0080;
const OPCODE_MASK: u16 = 0x7800;
const RCODE_MASK: u16 = 0x000F;

pub const CLASS_IN: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("invalid name: {0}")]
    InvalidName(String),
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
}

/// Record type code. Unknown codes are preserved verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordType(pub u16);

impl RecordType {
    pub const A: RecordType = RecordType(1);
    pub const NS: RecordType = RecordType(2);
    pub const CNAME: RecordType = RecordType(5);
    pub const PTR: RecordType = RecordType(12);
    pub const AAAA: RecordType = RecordType(28);

    /// Types whose rdata is a single domain name (decompressed on decode).
    fn has_name_rdata(self) -> bool {
        matches!(self, RecordType::NS | RecordType::CNAME | RecordType::PTR)
    }
}

impl fmt::Display for RecordType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            RecordType::A => f.write_str("A"),
            RecordType::NS => f.write_str("NS"),
            RecordType::CNAME => f.write_str("CNAME"),
            RecordType::PTR => f.write_str("PTR"),
            RecordType::AAAA => f.write_str("AAAA"),
            RecordType(other) => write!(f, "TYPE{other}"),
        }
    }
}

impl FromStr for RecordType {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(RecordType::A),
            "NS" => Ok(RecordType::NS),
            "CNAME" => Ok(RecordType::CNAME),
            "PTR" => Ok(RecordType::PTR),
            "AAAA" => Ok(RecordType::AAAA),
            other => other
                .strip_prefix("TYPE")
                .and_then(|n| n.parse().ok())
                .map(RecordType)
                .ok_or_else(|| WireError::InvalidName(format!("unknown record type {s}"))),
        }
    }
}

/// Response code (4-bit header field).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rcode(pub u8);

impl Rcode {
    pub const NOERROR: Rcode = Rcode(0);
    pub const FORMERR: Rcode = Rcode(1);
    pub const SERVFAIL: Rcode = Rcode(2);
    pub const NXDOMAIN: Rcode = Rcode(3);
    pub const REFUSED: Rcode = Rcode(5);
}

impl fmt::Display for Rcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Rcode::NOERROR => f.write_str("NOERROR"),
            Rcode::FORMERR => f.write_str("FORMERR"),
            Rcode::SERVFAIL => f.write_str("SERVFAIL"),
            Rcode::NXDOMAIN => f.write_str("NXDOMAIN"),
            Rcode::REFUSED => f.write_str("REFUSED"),
            Rcode(other) => write!(f, "RCODE{other}"),
        }
    }
}

/// A domain name, held as lower-cased labels.
///
/// The presentation form has no trailing dot (the root is `.`). Bytes outside
/// printable ASCII, and the `.`/`\` characters inside a label, use the usual
/// `\DDD` / `\.` escapes.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Name {
    labels: Vec<Vec<u8>>,
}

impl Name {
    pub fn root() -> Name {
        Name { labels: Vec::new() }
    }

    /// Builds a name from raw label bytes, enforcing the length limits.
    pub fn from_labels<I, L>(labels: I) -> Result<Name, WireError>
    where
        I: IntoIterator<Item = L>,
        L: AsRef<[u8]>,
    {
        let mut out = Vec::new();
        let mut wire_len = 1;
        for label in labels {
            let label = label.as_ref();
            if label.is_empty() {
                return Err(WireError::InvalidName("empty label".into()));
            }
            if label.len() > MAX_LABEL_LEN {
                return Err(WireError::InvalidName(format!(
                    "label of {} bytes exceeds {MAX_LABEL_LEN}",
                    label.len()
                )));
            }
            wire_len += label.len() + 1;
            if wire_len > MAX_NAME_WIRE_LEN {
                return Err(WireError::InvalidName(format!(
                    "name exceeds {MAX_NAME_WIRE_LEN} bytes"
                )));
            }
            out.push(label.to_ascii_lowercase());
        }
        Ok(Name { labels: out })
    }

    pub fn parse(s: &str) -> Result<Name, WireError> {
        let s = s.trim();
        if s == "." {
            return Ok(Name::root());
        }
        if s.is_empty() {
            return Err(WireError::InvalidName("empty name".into()));
        }
        let body = match s.strip_suffix('.') {
            Some(b) if !b.ends_with('\\') || b.ends_with("\\\\") => b,
            _ => s,
        };
        let mut labels = Vec::new();
        let mut cur = Vec::new();
        let bytes = body.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'.' => {
                    labels.push(std::mem::take(&mut cur));
                    i += 1;
                }
                b'\\' => {
                    let rest = &bytes[i + 1..];
                    if rest.len() >= 3 && rest[..3].iter().all(u8::is_ascii_digit) {
                        let v = (rest[0] - b'0') as u32 * 100
                            + (rest[1] - b'0') as u32 * 10
                            + (rest[2] - b'0') as u32;
                        let v = u8::try_from(v)
                            .map_err(|_| WireError::InvalidName(format!("bad escape in {s}")))?;
                        cur.push(v);
                        i += 4;
                    } else if let Some(&c) = rest.first() {
                        cur.push(c);
                        i += 2;
                    } else {
                        return Err(WireError::InvalidName(format!("dangling escape in {s}")));
                    }
                }
                c => {
                    cur.push(c);
                    i += 1;
                }
            }
        }
        labels.push(cur);
        Name::from_labels(labels).map_err(|e| match e {
            WireError::InvalidName(why) => WireError::InvalidName(format!("{s}: {why}")),
            other => other,
        })
    }

    pub fn labels(&self) -> impl Iterator<Item = &[u8]> {
        self.labels.iter().map(Vec::as_slice)
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn is_root(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn wire_len(&self) -> usize {
        self.labels.iter().map(|l| l.len() + 1).sum::<usize>() + 1
    }

    /// True if `self` equals `other` or lies beneath it.
    pub fn is_subdomain_of(&self, other: &Name) -> bool {
        self.labels.len() >= other.labels.len()
            && self.labels[self.labels.len() - other.labels.len()..] == other.labels[..]
    }

    /// Prepends one label, e.g. to mint a unique canary under a controlled zone.
    pub fn prepend(&self, label: &str) -> Result<Name, WireError> {
        Name::from_labels(std::iter::once(label.as_bytes()).chain(self.labels()))
    }

    /// True if every label is a conventional hostname label (letters, digits,
    /// hyphen, underscore).
    pub fn is_hostname(&self) -> bool {
        !self.labels.is_empty()
            && self.labels.iter().all(|l| {
                l.iter()
                    .all(|&b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
            })
    }

    fn write_wire(&self, out: &mut Vec<u8>) {
        for label in &self.labels {
            out.push(label.len() as u8);
            out.extend_from_slice(label);
        }
        out.push(0);
    }
}

impl fmt::Display for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.labels.is_empty() {
            return f.write_str(".");
        }
        for (i, label) in self.labels.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            for &b in label {
                match b {
                    b'.' | b'\\' => write!(f, "\\{}", b as char)?,
                    0x21..=0x7e => write!(f, "{}", b as char)?,
                    _ => write!(f, "\\{b:03}")?,
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Name({self})")
    }
}

impl FromStr for Name {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Name::parse(s)
    }
}

impl Serialize for Name {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Name {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Name::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub name: Name,
    pub qtype: RecordType,
    pub qclass: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsQuery {
    pub id: u16,
    pub qname: Name,
    pub qtype: RecordType,
    pub qclass: u16,
    pub recursion_desired: bool,
}

impl DnsQuery {
    /// An IN-class query.
    pub fn new(id: u16, qname: Name, qtype: RecordType, recursion_desired: bool) -> DnsQuery {
        DnsQuery {
            id,
            qname,
            qtype,
            qclass: CLASS_IN,
            recursion_desired,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceRecord {
    pub name: Name,
    pub rtype: RecordType,
    pub class: u16,
    pub ttl: u32,
    /// Uncompressed rdata. Name-valued rdata (CNAME, NS, PTR) is stored in
    /// expanded wire form; everything else is kept exactly as received.
    pub rdata: Vec<u8>,
}

impl ResourceRecord {
    pub fn address(name: Name, ttl: u32, addr: IpAddr) -> ResourceRecord {
        let (rtype, rdata) = match addr {
            IpAddr::V4(a) => (RecordType::A, a.octets().to_vec()),
            IpAddr::V6(a) => (RecordType::AAAA, a.octets().to_vec()),
        };
        ResourceRecord {
            name,
            rtype,
            class: CLASS_IN,
            ttl,
            rdata,
        }
    }

    pub fn cname(name: Name, ttl: u32, target: &Name) -> ResourceRecord {
        let mut rdata = Vec::with_capacity(target.wire_len());
        target.write_wire(&mut rdata);
        ResourceRecord {
            name,
            rtype: RecordType::CNAME,
            class: CLASS_IN,
            ttl,
            rdata,
        }
    }

    pub fn cname_target(&self) -> Option<Name> {
        if self.rtype != RecordType::CNAME {
            return None;
        }
        let mut reader = Reader::new(&self.rdata);
        let name = reader.name().ok()?;
        (reader.pos == self.rdata.len()).then_some(name)
    }

    pub fn ip_addr(&self) -> Option<IpAddr> {
        match self.rtype {
            RecordType::A => <[u8; 4]>::try_from(self.rdata.as_slice())
                .ok()
                .map(|o| IpAddr::V4(Ipv4Addr::from(o))),
            RecordType::AAAA => <[u8; 16]>::try_from(self.rdata.as_slice())
                .ok()
                .map(|o| IpAddr::V6(Ipv6Addr::from(o))),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsResponse {
    pub id: u16,
    pub rcode: Rcode,
    pub recursion_desired: bool,
    pub recursion_available: bool,
    pub authoritative: bool,
    pub truncated: bool,
    pub question: Option<Question>,
    pub answers: Vec<ResourceRecord>,
    pub authority: Vec<ResourceRecord>,
    pub additional: Vec<ResourceRecord>,
}

impl DnsResponse {
    /// An empty NOERROR reply echoing the query's id, question and RD bit.
    pub fn reply_to(query: &DnsQuery) -> DnsResponse {
        DnsResponse {
            id: query.id,
            rcode: Rcode::NOERROR,
            recursion_desired: query.recursion_desired,
            recursion_available: true,
            authoritative: false,
            truncated: false,
            question: Some(Question {
                name: query.qname.clone(),
                qtype: query.qtype,
                qclass: query.qclass,
            }),
            answers: Vec::new(),
            authority: Vec::new(),
            additional: Vec::new(),
        }
    }
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_header(out: &mut Vec<u8>, id: u16, flags: u16, counts: [u16; 4]) {
    put_u16(out, id);
    put_u16(out, flags);
    for c in counts {
        put_u16(out, c);
    }
}

pub fn encode_query(query: &DnsQuery) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + query.qname.wire_len() + 4);
    let flags = if query.recursion_desired { FLAG_RD } else { 0 };
    put_header(&mut out, query.id, flags, [1, 0, 0, 0]);
    query.qname.write_wire(&mut out);
    put_u16(&mut out, query.qtype.0);
    put_u16(&mut out, query.qclass);
    out
}

/// Encodes a response without name compression.
pub fn encode_response(response: &DnsResponse) -> Vec<u8> {
    let mut flags = FLAG_QR | (response.rcode.0 as u16 & RCODE_MASK);
    if response.authoritative {
        flags |= FLAG_AA;
    }
    if response.truncated {
        flags |= FLAG_TC;
    }
    if response.recursion_desired {
        flags |= FLAG_RD;
    }
    if response.recursion_available {
        flags |= FLAG_RA;
    }
    let counts = [
        response.question.is_some() as u16,
        response.answers.len() as u16,
        response.authority.len() as u16,
        response.additional.len() as u16,
    ];
    let mut out = Vec::with_capacity(512);
    put_header(&mut out, response.id, flags, counts);
    if let Some(q) = &response.question {
        q.name.write_wire(&mut out);
        put_u16(&mut out, q.qtype.0);
        put_u16(&mut out, q.qclass);
    }
    for rr in response
        .answers
        .iter()
        .chain(&response.authority)
        .chain(&response.additional)
    {
        rr.name.write_wire(&mut out);
        put_u16(&mut out, rr.rtype.0);
        put_u16(&mut out, rr.class);
        out.extend_from_slice(&rr.ttl.to_be_bytes());
        put_u16(&mut out, rr.rdata.len() as u16);
        out.extend_from_slice(&rr.rdata);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(WireError::Malformed("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Reads a possibly compressed name. Every pointer must target an offset
    /// strictly before the start of the label run it interrupts, which rules
    /// out both forward references and loops.
    fn name(&mut self) -> Result<Name, WireError> {
        let mut labels: Vec<&[u8]> = Vec::new();
        let mut wire_len = 1;
        let mut cur = self.pos;
        let mut run_start = self.pos;
        let mut resume = None;
        loop {
            let len = *self.buf.get(cur).ok_or(WireError::Malformed("truncated name"))?;
            match len & 0xC0 {
                0x00 if len == 0 => {
                    cur += 1;
                    break;
                }
                0x00 => {
                    let start = cur + 1;
                    let end = start + len as usize;
                    let label = self
                        .buf
                        .get(start..end)
                        .ok_or(WireError::Malformed("truncated label"))?;
                    wire_len += label.len() + 1;
                    if wire_len > MAX_NAME_WIRE_LEN {
                        return Err(WireError::Malformed("name too long"));
                    }
                    labels.push(label);
                    cur = end;
                }
                0xC0 => {
                    let lo = *self.buf.get(cur + 1).ok_or(WireError::Malformed("truncated pointer"))?;
                    let target = (((len & 0x3F) as usize) << 8) | lo as usize;
                    if target >= run_start {
                        return Err(WireError::Malformed("compression pointer not backward"));
                    }
                    if resume.is_none() {
                        resume = Some(cur + 2);
                    }
                    run_start = target;
                    cur = target;
                }
                _ => return Err(WireError::Malformed("unsupported label type")),
            }
        }
        self.pos = resume.unwrap_or(cur);
        Name::from_labels(labels).map_err(|_| WireError::Malformed("bad name"))
    }

    fn question(&mut self) -> Result<Question, WireError> {
        let name = self.name()?;
        let qtype = RecordType(self.u16()?);
        let qclass = self.u16()?;
        Ok(Question { name, qtype, qclass })
    }

    fn record(&mut self) -> Result<ResourceRecord, WireError> {
        let name = self.name()?;
        let rtype = RecordType(self.u16()?);
        let class = self.u16()?;
        let ttl = self.u32()?;
        if ttl > MAX_TTL {
            return Err(WireError::Malformed("ttl above 2^31-1"));
        }
        let rdlen = self.u16()? as usize;
        let start = self.pos;
        let raw = self.take(rdlen)?;
        let rdata = if rtype.has_name_rdata() {
            let mut sub = Reader {
                buf: self.buf,
                pos: start,
            };
            let target = sub.name()?;
            if sub.pos != start + rdlen {
                return Err(WireError::Malformed("rdata length mismatch"));
            }
            let mut v = Vec::with_capacity(target.wire_len());
            target.write_wire(&mut v);
            v
        } else {
            raw.to_vec()
        };
        Ok(ResourceRecord {
            name,
            rtype,
            class,
            ttl,
            rdata,
        })
    }
}

struct Header {
    id: u16,
    flags: u16,
    counts: [u16; 4],
}

fn read_header(r: &mut Reader<'_>) -> Result<Header, WireError> {
    if r.buf.len() < HEADER_LEN {
        return Err(WireError::Malformed("shorter than a header"));
    }
    let id = r.u16()?;
    let flags = r.u16()?;
    let mut counts = [0u16; 4];
    for c in &mut counts {
        *c = r.u16()?;
    }
    Ok(Header { id, flags, counts })
}

/// Decodes the first question of a query packet (server side).
pub fn decode_query(packet: &[u8]) -> Result<DnsQuery, WireError> {
    let mut r = Reader::new(packet);
    let h = read_header(&mut r)?;
    if h.flags & FLAG_QR != 0 {
        return Err(WireError::Malformed("QR set on a query"));
    }
    if h.flags & OPCODE_MASK != 0 {
        return Err(WireError::Malformed("unsupported opcode"));
    }
    if h.counts[0] == 0 {
        return Err(WireError::Malformed("no question"));
    }
    let q = r.question()?;
    Ok(DnsQuery {
        id: h.id,
        qname: q.name,
        qtype: q.qtype,
        qclass: q.qclass,
        recursion_desired: h.flags & FLAG_RD != 0,
    })
}

pub fn decode_response(packet: &[u8]) -> Result<DnsResponse, WireError> {
    let mut r = Reader::new(packet);
    let h = read_header(&mut r)?;
    let [qd, an, ns, ar] = h.counts;
    // Each question needs at least 5 bytes and each record at least 11.
    let min_len = HEADER_LEN + qd as usize * 5 + (an as usize + ns as usize + ar as usize) * 11;
    if min_len > packet.len() {
        return Err(WireError::Malformed("counts exceed packet"));
    }
    let mut question = None;
    for i in 0..qd {
        let q = r.question()?;
        if i == 0 {
            question = Some(q);
        }
    }
    let mut section = |n: u16| -> Result<Vec<ResourceRecord>, WireError> {
        (0..n).map(|_| r.record()).collect()
    };
    let answers = section(an)?;
    let authority = section(ns)?;
    let additional = section(ar)?;
    Ok(DnsResponse {
        id: h.id,
        rcode: Rcode((h.flags & RCODE_MASK) as u8),
        recursion_desired: h.flags & FLAG_RD != 0,
        recursion_available: h.flags & FLAG_RA != 0,
        authoritative: h.flags & FLAG_AA != 0,
        truncated: h.flags & FLAG_TC != 0,
        question,
        answers,
        authority,
        additional,
    })
}

const MAX_CNAME_CHAIN: usize = 16;

/// Minimum TTL along the answer chain for `qname`, following CNAMEs that are
/// present in the same response. `None` when nothing in the answer section
/// belongs to the chain.
pub fn min_answer_ttl(response: &DnsResponse, qname: &Name) -> Option<u32> {
    chain_records(response, qname).map(|rr| rr.ttl).min()
}

/// The answer records that make up the resolution chain for `qname`.
pub fn chain_records<'a>(
    response: &'a DnsResponse,
    qname: &Name,
) -> impl Iterator<Item = &'a ResourceRecord> {
    let mut owners = vec![qname.clone()];
    let mut current = qname.clone();
    for _ in 0..MAX_CNAME_CHAIN {
        let next = response
            .answers
            .iter()
            .find(|rr| rr.name == current)
            .and_then(ResourceRecord::cname_target);
        match next {
            Some(t) if !owners.contains(&t) => {
                owners.push(t.clone());
                current = t;
            }
            _ => break,
        }
    }
    response
        .answers
        .iter()
        .filter(move |rr| owners.contains(&rr.name))
}
