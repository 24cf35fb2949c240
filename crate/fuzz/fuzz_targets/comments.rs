#![no_main]

use libfuzzer_sys::fuzz_target;
use simpa_core::corpus::{availability_report, extract_candidates, parse_comments, FilterConfig, PronounMatcher};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(comments) = parse_comments(text, "fuzz") {
        let stats = availability_report(&comments, &PronounMatcher::default());
        let config = FilterConfig { min_tokens: 1, matcher: PronounMatcher::default() };
        let cands = extract_candidates(&comments, &config).expect("valid config");
        assert_eq!(cands.len(), stats.pronoun_sentences);
    }
});
