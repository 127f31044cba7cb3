#![no_main]

use libfuzzer_sys::fuzz_target;
use reverse_core::AnnotatedText;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = serde_json::from_slice::<AnnotatedText>(data) {
        let again: AnnotatedText = serde_json::from_str(&serde_json::to_string(&text).unwrap()).unwrap();
        assert_eq!(again, text);
    }
});
