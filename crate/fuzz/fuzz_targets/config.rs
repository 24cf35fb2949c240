#![no_main]

use libfuzzer_sys::fuzz_target;
use simpa_core::config::Config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = Config::parse(text) {
        let rendered = config.to_toml().expect("valid config renders");
        assert_eq!(Config::parse(&rendered).expect("rendered config parses"), config);
    }
});
