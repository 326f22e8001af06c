//! Arbitrary text must never panic the manifest parser. Accepted
//! manifests survive a render → parse cycle with their entries intact,
//! and the rendered form is canonical (stable under another cycle).

#![no_main]

use libfuzzer_sys::fuzz_target;
use retfuse::data::{parse_manifest, render_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(entries) = parse_manifest(text) {
        let canon = render_manifest(&entries);
        let again = parse_manifest(&canon).expect("rendered manifest must parse");
        assert_eq!(entries, again, "render → parse must preserve entries");
        assert_eq!(canon, render_manifest(&again), "rendered form must be stable");
    }
});
