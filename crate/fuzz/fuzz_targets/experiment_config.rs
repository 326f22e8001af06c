//! Arbitrary text must never panic the experiment-config parser
//! (TOML deserialization plus semantic validation).

#![no_main]

use libfuzzer_sys::fuzz_target;
use retfuse::experiment::parse_experiment;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_experiment(text);
});
