#![no_main]

use libfuzzer_sys::fuzz_target;
use reverse_core::curation::load_raw_corpus;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = load_raw_corpus(text);
    }
});
