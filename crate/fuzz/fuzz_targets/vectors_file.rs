#![no_main]

use libfuzzer_sys::fuzz_target;
use simpa_core::similarity::VectorsFile;

fuzz_target!(|data: &[u8]| {
    let _ = VectorsFile::parse(data);
});
