//! Shared generators for wire-format tests.

#![allow(dead_code)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snoopdns::wire::*;

pub fn label() -> impl Strategy<Value = Vec<u8>> {
    prop_oneof![
        "[a-z0-9-]{1,20}".prop_map(String::into_bytes),
        proptest::collection::vec(any::<u8>(), 1..12),
    ]
}

pub fn name() -> impl Strategy<Value = Name> {
    proptest::collection::vec(label(), 0..5).prop_map(|ls| Name::from_labels(ls).unwrap())
}

pub fn record() -> impl Strategy<Value = ResourceRecord> {
    let ttl = 0..=MAX_TTL;
    let class = prop_oneof![Just(CLASS_IN), any::<u16>()];
    prop_oneof![
        (name(), ttl.clone(), any::<[u8; 4]>()).prop_map(|(n, t, a)| {
            ResourceRecord::address(n, t, std::net::Ipv4Addr::from(a).into())
        }),
        (name(), ttl.clone(), any::<[u8; 16]>()).prop_map(|(n, t, a)| {
            ResourceRecord::address(n, t, std::net::Ipv6Addr::from(a).into())
        }),
        (name(), ttl.clone(), name(), prop_oneof![
            Just(RecordType::CNAME),
            Just(RecordType::NS),
            Just(RecordType::PTR)
        ])
        .prop_map(|(n, t, target, rtype)| {
            let mut r = ResourceRecord::cname(n, t, &target);
            r.rtype = rtype;
            r
        }),
        (
            name(),
            ttl,
            class,
            (13u16..=u16::MAX).prop_filter("not a name type", |t| *t != 28),
            proptest::collection::vec(any::<u8>(), 0..40)
        )
            .prop_map(|(n, t, class, rtype, rdata)| ResourceRecord {
                name: n,
                rtype: RecordType(rtype),
                class,
                ttl: t,
                rdata,
            }),
    ]
}

pub fn response() -> impl Strategy<Value = DnsResponse> {
    (
        any::<u16>(),
        0u8..16,
        any::<[bool; 4]>(),
        proptest::option::of((name(), any::<u16>(), any::<u16>())),
        proptest::collection::vec(record(), 0..5),
        proptest::collection::vec(record(), 0..3),
        proptest::collection::vec(record(), 0..3),
    )
        .prop_map(|(id, rcode, flags, q, answers, authority, additional)| DnsResponse {
            id,
            rcode: Rcode(rcode),
            recursion_desired: flags[0],
            recursion_available: flags[1],
            authoritative: flags[2],
            truncated: flags[3],
            question: q.map(|(name, qtype, qclass)| Question {
                name,
                qtype: RecordType(qtype),
                qclass,
            }),
            answers,
            authority,
            additional,
        })
}

/// Feeds `count` random and mutated packets to both decoders. Returns the
/// first error that is not `Malformed`.
pub fn fuzz_decoders(count: u32, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<Vec<u8>> = [
        encode_query(&DnsQuery::new(7, Name::parse("www.example.com").unwrap(), RecordType::A, true)),
        {
            let q = DnsQuery::new(9, Name::parse("a.b.example").unwrap(), RecordType::A, true);
            let mut r = DnsResponse::reply_to(&q);
            let target = Name::parse("c.example").unwrap();
            r.answers.push(ResourceRecord::cname(q.qname.clone(), 60, &target));
            r.answers.push(ResourceRecord::address(target, 30, "192.0.2.1".parse().unwrap()));
            encode_response(&r)
        },
    ]
    .into();
    let check = |r: Result<(), WireError>| match r {
        Err(e) if !matches!(e, WireError::Malformed(_)) => Err(format!("unexpected error kind: {e:?}")),
        _ => Ok(()),
    };
    for i in 0..count {
        let bytes: Vec<u8> = if i % 2 == 0 {
            let len = rng.random_range(0..300);
            (0..len).map(|_| rng.random()).collect()
        } else {
            // Mutate a valid packet: flip bytes, truncate or extend.
            let mut b = seeds[(i as usize / 2) % seeds.len()].clone();
            for _ in 0..rng.random_range(1..6) {
                let at = rng.random_range(0..b.len());
                b[at] = rng.random();
            }
            if rng.random_bool(0.3) {
                b.truncate(rng.random_range(0..=b.len()));
            }
            if rng.random_bool(0.2) {
                b.extend((0..rng.random_range(1..20)).map(|_| rng.random::<u8>()));
            }
            b
        };
        check(decode_response(&bytes).map(|_| ()))?;
        check(decode_query(&bytes).map(|_| ()))?;
    }
    Ok(())
}
