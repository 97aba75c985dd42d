#![no_main]

use ahmf_core::metrics::{parse_report_csv, report_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_report_csv(data) {
        if let Ok(text) = report_csv(&rows) {
            let _ = parse_report_csv(text.as_bytes());
        }
    }
});
