#![no_main]

use ahmf_core::data::format::{decode_tensor, decode_tensor_prefix, encode_tensor};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((t, used)) = decode_tensor_prefix(data) {
        assert!(used <= data.len());
        let _ = t;
    }
    if let Ok(t) = decode_tensor(data) {
        let again = encode_tensor(&t);
        assert_eq!(again, data);
    }
});
