#![no_main]

use chestssl::tensor_io::{decode, encode_f64};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(blob) = decode(data) {
        let n: usize = blob.shape.iter().product();
        assert_eq!(n, blob.data.len());
        if blob.dtype == chestssl::tensor_io::DType::F64 {
            assert_eq!(encode_f64(&blob.into_f64()), data);
        }
    }
});
