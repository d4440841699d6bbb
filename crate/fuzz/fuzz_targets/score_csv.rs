#![no_main]

use glimpse_pad::metrics::{read_scores, write_scores};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_scores(data) {
        let mut out = Vec::new();
        write_scores(&mut out, &records).expect("writable");
        let again = read_scores(out.as_slice()).expect("round trip");
        assert_eq!(again.len(), records.len());
    }
});
