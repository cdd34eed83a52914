mod common;

use common::{fuzz_decoders, name, response};
use proptest::prelude::*;

use snoopdns::wire::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn response_round_trip(resp in response()) {
        let bytes = encode_response(&resp);
        prop_assert_eq!(decode_response(&bytes).unwrap(), resp);
    }

    #[test]
    fn query_round_trip(id in any::<u16>(), qname in name(), qtype in any::<u16>(), rd in any::<bool>()) {
        let q = DnsQuery::new(id, qname, RecordType(qtype), rd);
        prop_assert_eq!(decode_query(&encode_query(&q)).unwrap(), q);
    }

    #[test]
    fn presentation_round_trip(n in name()) {
        prop_assert_eq!(Name::parse(&n.to_string()).unwrap(), n);
    }
}

#[test]
fn decoder_survives_random_bytes() {
    fuzz_decoders(100_000, 0xdeca_f00d).unwrap();
}
