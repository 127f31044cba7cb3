#![no_main]

use libfuzzer_sys::fuzz_target;
use reverse_core::backends::parse_distribution_response;
use reverse_core::Vocabulary;

fuzz_target!(|data: &[u8]| {
    let Ok(body) = std::str::from_utf8(data) else { return };
    let vocab = Vocabulary::new(["a", "dog", "cat"]);
    if let Ok(dist) = parse_distribution_response(&vocab, body) {
        let total: f64 = dist.probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
});
