#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = dgpo::config::from_str(text, &[]) {
            let again = dgpo::config::from_str(&cfg.to_toml(), &[]).expect("resolved config re-parses");
            assert_eq!(cfg.hash(), again.hash());
        }
    }
});
