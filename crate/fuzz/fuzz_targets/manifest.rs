#![no_main]

use flowdeblur_cli::RunManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = RunManifest::from_json(text) {
        let json = m.to_json();
        let back = RunManifest::from_json(&json).expect("own output parses");
        assert_eq!(back.to_json(), json);
    }
});
