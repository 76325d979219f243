#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = capfeed::feedback::parse_log(s);
        let _ = capfeed::feedback::parse_event_id(s);
    }
});
