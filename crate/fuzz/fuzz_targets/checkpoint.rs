#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = capfeed::captioner::checkpoint_from_json(data);
});
