#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = dgpo::trainer::parse_sweep_spec(text) {
            for cell in &spec.cells {
                let _ = cell.overrides();
            }
        }
    }
});
