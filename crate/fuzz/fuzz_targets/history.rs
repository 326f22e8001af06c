//! Arbitrary text must never panic the training-history parser.
//! Accepted histories survive a render → parse cycle intact, and the
//! rendered form is stable under another cycle.

#![no_main]

use libfuzzer_sys::fuzz_target;
use retfuse::train::TrainHistory;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(h) = TrainHistory::parse(text) {
        let canon = h.render();
        let again = TrainHistory::parse(&canon).expect("rendered history must parse");
        assert_eq!(h, again, "render → parse must preserve the history");
        assert_eq!(canon, again.render(), "rendered form must be stable");
    }
});
