//! Drives the sketch blob decoder with arbitrary bytes; anything that
//! decodes must re-encode to an equal blob and stay usable.

#![no_main]

use libfuzzer_sys::fuzz_target;
use simsketch::sketch::FastAgmsSketch;

fuzz_target!(|data: &[u8]| {
    if let Ok(sketch) = FastAgmsSketch::decode_blob(data) {
        let blob = sketch.encode_blob();
        let again = FastAgmsSketch::decode_blob(&blob).expect("canonical blob must decode");
        assert_eq!(blob, again.encode_blob(), "encoding must be canonical");
        std::hint::black_box(sketch.estimate_f2());
    }
});
