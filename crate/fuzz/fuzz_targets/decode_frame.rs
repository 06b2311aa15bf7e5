#![no_main]

use feddp::net::decode_frame;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = decode_frame(data) {
        assert_eq!(frame.encode(), data);
    }
});
