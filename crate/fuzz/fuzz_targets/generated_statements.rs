#![no_main]

use libfuzzer_sys::fuzz_target;
use simpa_core::annotation::parse_generated_statements;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for s in parse_generated_statements(text) {
        assert!(!s.trim().is_empty());
    }
});
