#![no_main]

use libfuzzer_sys::fuzz_target;
use qot_core::dual::checkpoint::parse_header;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_header(text);
    }
});
