//! Arbitrary bytes must never panic the tensor decoder, and anything
//! it accepts must re-encode to an identical byte string.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = retfuse::ften::from_bytes(data) {
        let bytes = retfuse::ften::to_bytes(&t);
        assert_eq!(bytes, data, "accepted input must round-trip bit-exactly");
    }
});
