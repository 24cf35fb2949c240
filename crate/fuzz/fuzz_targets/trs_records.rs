#![no_main]

use libfuzzer_sys::fuzz_target;
use simpa_core::taxonomy::{parse_trs_records, TraitTaxonomy, TrsSet};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(items) = parse_trs_records(text, "fuzz") {
        if let Ok(set) = TrsSet::new("fuzz", None, items, &TraitTaxonomy::big_five()) {
            let _ = set.stats(&TraitTaxonomy::big_five());
            let again = parse_trs_records(&set.to_jsonl(), "fuzz").expect("serialized set parses");
            assert_eq!(again.as_slice(), set.items());
        }
    }
});
