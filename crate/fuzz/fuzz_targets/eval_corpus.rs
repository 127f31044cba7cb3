#![no_main]

use libfuzzer_sys::fuzz_target;
use reverse_core::metrics::{parse_eval_corpus, ObjectDictionary};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(inputs) = parse_eval_corpus(text) {
        let dict = ObjectDictionary::new(["dog", "cat", "fire hydrant"]);
        for i in &inputs {
            let _ = i.to_record(&dict);
        }
    }
});
