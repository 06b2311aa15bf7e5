#![no_main]

use feddp::learn::dataset::decode_dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = decode_dataset(data) {
        assert_eq!(ds.to_bytes(), data);
    }
});
