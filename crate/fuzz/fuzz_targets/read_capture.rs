#![no_main]

use feddp::net::{read_capture, write_capture};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frames) = read_capture(data) {
        assert_eq!(write_capture(&frames), data);
    }
});
