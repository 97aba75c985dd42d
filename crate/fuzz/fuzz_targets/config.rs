#![no_main]

use ahmf_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = RunConfig::parse(text) {
        let printed = c.resolved();
        let back = RunConfig::parse(&printed).expect("resolved config parses");
        assert_eq!(back.resolved(), printed);
    }
});
