#![no_main]

use ahmf_core::data::format::decode_pgm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = decode_pgm(data) {
        assert_eq!(p.pixels.len(), p.width * p.height);
    }
});
