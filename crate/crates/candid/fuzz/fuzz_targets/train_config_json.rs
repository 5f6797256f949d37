#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = candid::pipeline::TrainConfig::from_json(data);
});
