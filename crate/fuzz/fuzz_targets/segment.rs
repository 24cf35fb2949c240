#![no_main]

use libfuzzer_sys::fuzz_target;
use simpa_core::corpus::{segment, token_count};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let parts = segment(text);
    assert_eq!(segment(text), parts);
    for p in &parts {
        let _ = token_count(p);
    }
});
