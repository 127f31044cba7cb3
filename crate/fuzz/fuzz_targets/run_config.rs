#![no_main]

use libfuzzer_sys::fuzz_target;
use reverse_cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_json(text) {
        if let Ok(cfg) = cfg.finalize() {
            let _ = cfg.decode_config().validate();
            let _ = cfg.header();
        }
    }
});
