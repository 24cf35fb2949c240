#![no_main]

use libfuzzer_sys::fuzz_target;
use simpa_core::annotation::{latest_bundle_annotations, AnnotationIndex, BundleAnnotation, MatchAnnotation};
use simpa_core::store::parse_complete_lines;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_complete_lines::<MatchAnnotation>(text, "fuzz") {
        let valid: Vec<MatchAnnotation> = records.into_iter().filter(|r| r.validate().is_ok()).collect();
        let index = AnnotationIndex::new(&valid);
        let _ = index.category_matrix();
    }
    if let Ok(records) = parse_complete_lines::<BundleAnnotation>(text, "fuzz") {
        let valid: Vec<BundleAnnotation> = records.into_iter().filter(|r| r.validate().is_ok()).collect();
        let _ = latest_bundle_annotations(&valid);
    }
});
