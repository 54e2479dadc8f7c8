#![no_main]

use flowdeblur::io::{decode_flo, encode_flo};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(flow) = decode_flo(data) {
        // values came from f32, so re-encoding is exact
        assert_eq!(encode_flo(&flow), data);
    }
});
