#![no_main]

use libfuzzer_sys::fuzz_target;
use vimf::ModelConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ModelConfig::from_json(s) {
        // Anything accepted must survive a round trip.
        let again = ModelConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
    }
});
