//! Arbitrary text must never panic the scores parser. Accepted score
//! files survive a render → parse cycle intact (floats use shortest
//! round-trip rendering), and the rendered form is stable.

#![no_main]

use libfuzzer_sys::fuzz_target;
use retfuse::experiment::{parse_scores, render_scores};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(set) = parse_scores(text) {
        let canon = render_scores(&set);
        let again = parse_scores(&canon).expect("rendered scores must parse");
        assert_eq!(set, again, "render → parse must preserve the scored set");
        assert_eq!(canon, render_scores(&again), "rendered form must be stable");
    }
});
