#![no_main]

use libfuzzer_sys::fuzz_target;
use mixcycle::data::decode_wav;

fuzz_target!(|data: &[u8]| {
    if let Ok(wav) = decode_wav(data) {
        assert!(wav.samples.iter().all(|s| s.is_finite()));
    }
});
