#![no_main]

use libfuzzer_sys::fuzz_target;
use simpa_core::taxonomy::TraitTaxonomy;

fuzz_target!(|data: &[u8]| {
    if let Ok(raw) = serde_json::from_slice::<TraitTaxonomy>(data) {
        let _ = TraitTaxonomy::new(raw.domains().to_vec());
    }
});
