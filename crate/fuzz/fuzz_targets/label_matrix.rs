#![no_main]

use libfuzzer_sys::fuzz_target;
use simpa_cli::metrics::{alpha_report, pairwise_report, parse_matrix_csv};
use simpa_core::annotation::AlphaMetric;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(matrix) = parse_matrix_csv(text) {
        let _ = alpha_report(&matrix, AlphaMetric::Ordinal);
        let _ = pairwise_report(&matrix);
    }
});
