#![no_main]

use chestssl::data::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = parse_manifest(text, "fuzz", None) {
            // Whatever parses must survive a write/parse round trip.
            let again = parse_manifest(&m.to_csv(), "fuzz", None).expect("reparse");
            assert_eq!(again.records, m.records);
        }
    }
});
