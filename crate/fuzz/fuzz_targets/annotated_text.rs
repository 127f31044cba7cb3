#![no_main]

use libfuzzer_sys::fuzz_target;
use reverse_core::protocol::{parse_spans, repair_generated, tokenize, AnnotatedText};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let tokens = tokenize(text);
    if let Ok(parsed) = parse_spans(tokens.clone()) {
        assert_eq!(parsed.tokens(), &tokens[..]);
        assert_eq!(parsed.hallucination_mask().len(), parsed.len());
    }
    let repaired = repair_generated(&tokens);
    assert!(parse_spans(repaired.tokens().to_vec()).is_ok());
    if let Ok(parsed) = AnnotatedText::parse_str(text) {
        assert_eq!(AnnotatedText::parse_str(&parsed.to_string()).unwrap(), parsed);
    }
});
