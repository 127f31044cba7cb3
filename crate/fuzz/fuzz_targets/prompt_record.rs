#![no_main]

use libfuzzer_sys::fuzz_target;
use reverse_cli::{OutcomeLine, PromptRecord};

fuzz_target!(|data: &[u8]| {
    if let Ok(record) = serde_json::from_slice::<PromptRecord>(data) {
        let _ = record.prompt();
    }
    let _ = serde_json::from_slice::<OutcomeLine>(data);
});
