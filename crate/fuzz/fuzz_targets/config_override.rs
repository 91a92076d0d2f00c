#![no_main]

use libfuzzer_sys::fuzz_target;
use mixcycle::config::parse_config_with_overrides;

// Each input line is one `key=value` override applied to an empty config.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let overrides: Vec<String> = text.lines().map(str::to_string).collect();
    let _ = parse_config_with_overrides("", &overrides);
});
