//! Drives the delimited-record stream parser with arbitrary bytes; the
//! first input byte picks the delimiter and an optional fixed column count.

#![no_main]

use libfuzzer_sys::fuzz_target;
use simsketch::cli::{stream_records, RecordFileFormat};
use std::io::Cursor;

fuzz_target!(|data: &[u8]| {
    let mut input = data;
    let mut delimiter = b'\t';
    let mut d = None;
    if let Some((&first, rest)) = input.split_first() {
        delimiter = if first & 1 == 0 { b'\t' } else { b',' };
        if first & 2 != 0 {
            d = Some(u32::from(first >> 2) % 9);
        }
        input = rest;
    }
    let format = RecordFileFormat { delimiter, d };
    let mut records = 0u64;
    let result = stream_records(Cursor::new(input), &format, &mut |index, fields| {
        assert_eq!(index, records, "record indices must be dense");
        records += 1;
        // Touch every field so splitting bugs surface under sanitizers.
        let bytes: usize = fields.iter().map(|f| f.len()).sum();
        std::hint::black_box(bytes);
        Ok(())
    });
    if let Ok(stats) = result {
        assert_eq!(stats.records, records);
        assert_eq!(stats.sha256_hex.len(), 64);
    }
});
