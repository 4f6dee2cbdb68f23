#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(instances) = dgpo::tasks::read_instances_jsonl(text) {
            for i in &instances {
                let _ = i.verify(&i.ground_truth);
            }
        }
    }
});
