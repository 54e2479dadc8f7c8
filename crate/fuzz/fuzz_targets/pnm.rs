#![no_main]

use flowdeblur::io::{decode_pnm, encode_pnm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pnm(data) {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = decode_pnm(&encode_pnm(&img)).expect("own output decodes");
        assert_eq!(again.dims(), img.dims());
        assert_eq!(again.channels(), img.channels());
    }
});
