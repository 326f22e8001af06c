//! Arbitrary bytes must never panic the archive decoder. Accepted
//! inputs re-serialize canonically (entries sorted), and that
//! canonical form must be a fixed point of parse → serialize.

#![no_main]

use libfuzzer_sys::fuzz_target;
use retfuse::archive::TensorArchive;

fuzz_target!(|data: &[u8]| {
    if let Ok(a) = TensorArchive::from_bytes(data) {
        let canon = a.to_bytes();
        let b = TensorArchive::from_bytes(&canon).expect("canonical form must parse");
        assert_eq!(a, b, "canonical form must preserve the value");
        assert_eq!(canon, b.to_bytes(), "canonical form must be a fixed point");
    }
});
