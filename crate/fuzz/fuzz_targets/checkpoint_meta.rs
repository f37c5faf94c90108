#![no_main]

use chestssl::checkpoint::parse_metadata;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(meta) = parse_metadata(text) {
            let again = parse_metadata(&meta.to_text()).expect("reparse");
            assert_eq!(again.epoch, meta.epoch);
            assert_eq!(again.loss_history.len(), meta.loss_history.len());
        }
    }
});
