//! Drives the truth-sidecar parser with arbitrary bytes; anything that
//! parses must survive a write/parse round trip unchanged.

#![no_main]

use libfuzzer_sys::fuzz_target;
use simsketch::baselines::{parse_truth_sidecar, write_truth_sidecar};

fuzz_target!(|data: &[u8]| {
    if let Ok(truth) = parse_truth_sidecar(data) {
        let text = write_truth_sidecar(&truth);
        let again = parse_truth_sidecar(text.as_bytes()).expect("round trip must parse");
        assert_eq!(truth, again);
    }
});
