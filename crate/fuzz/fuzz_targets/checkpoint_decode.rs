#![no_main]

use libfuzzer_sys::fuzz_target;
use vimf::harness::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = checkpoint::decode(data) {
        let _ = ck.into_model();
    }
});
