#![no_main]

use ahmf_core::data::manifest::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = Manifest::parse(data) {
        let text = m.to_tsv();
        let back = Manifest::parse(text.as_bytes()).expect("printed manifest parses");
        assert_eq!(back.to_tsv(), text);
    }
});
