#![no_main]

use libfuzzer_sys::fuzz_target;
use reverse_core::curation::{SkipList, SubstitutionDictionary};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let skip = SkipList::from_text(text);
    let _ = skip.contains("his hat");
    let _ = SubstitutionDictionary::from_text(text);
});
