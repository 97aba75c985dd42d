#![no_main]

use ahmf_core::checkpoint::{self, Checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::decode(data) {
        let bytes = c.encode().expect("decoded checkpoint re-encodes");
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode().unwrap(), bytes);
        let _ = checkpoint::load_trainer(&c);
    }
});
