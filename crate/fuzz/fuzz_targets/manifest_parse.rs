#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use mixcycle::data::manifest::{format_manifest, parse_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let base = Path::new("/corpus");
    if let Ok(records) = parse_manifest(text, base) {
        // Whatever parses must survive a format/parse round trip.
        let again = parse_manifest(&format_manifest(&records, base), base).expect("formatted manifest parses");
        assert_eq!(again, records);
    }
});
