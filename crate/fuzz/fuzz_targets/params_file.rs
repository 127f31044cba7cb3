#![no_main]

use libfuzzer_sys::fuzz_target;
use reverse_core::model::ModelParams;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(params) = ModelParams::from_json(text) {
        let _ = params.logits(&[0, 1]);
    }
});
