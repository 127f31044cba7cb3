#![no_main]

use libfuzzer_sys::fuzz_target;
use reverse_core::curation::{parse_dataset, parse_dataset_line};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(sample) = parse_dataset_line(text) {
        sample.validate().unwrap();
    }
    let _ = parse_dataset(text);
});
