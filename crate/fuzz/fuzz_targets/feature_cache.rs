#![no_main]

use chestssl::tensor_io::decode_features;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_features(data);
});
