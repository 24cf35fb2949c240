#![no_main]

use libfuzzer_sys::fuzz_target;
use simpa_core::annotation::{normalize_reply, parse_bundle_reply, parse_trs_reply};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = normalize_reply(text);
    let _ = parse_trs_reply(text);
    let _ = parse_bundle_reply(text);
});
