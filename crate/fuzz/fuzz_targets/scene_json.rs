#![no_main]

use flowdeblur::evalkit::{render_scene, SceneSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spec) = SceneSpec::from_json(text) {
        // keep iterations fast; large canvases are valid but slow
        if spec.width * spec.height * spec.frames <= 1 << 16 {
            let scene = render_scene(&spec).expect("valid spec renders");
            assert_eq!(scene.sharp.len(), spec.frames);
        }
    }
});
