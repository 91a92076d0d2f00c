#![no_main]

use libfuzzer_sys::fuzz_target;
use mixcycle::evaluation::parse_report;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = parse_report(text) {
        assert_eq!(report.n, report.per_item.len());
    }
});
