#![no_main]

use libfuzzer_sys::fuzz_target;
use vimf::harness::metrics::{parse_line, parse_log};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(rec) = parse_line(s) {
        assert_eq!(parse_line(&rec.to_line()).unwrap(), rec);
    }
    let _ = parse_log(s);
});
