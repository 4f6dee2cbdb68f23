#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = dgpo::checkpoint::decode(data) {
        // anything accepted must re-encode to the same bytes
        assert_eq!(dgpo::checkpoint::encode(&model), data);
    }
});
