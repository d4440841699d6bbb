#![no_main]

use glimpse_pad::data::decode_image;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data, None) {
        assert_eq!(img.data.len(), img.height * img.width * 3);
    }
    let _ = decode_image(data, Some(8));
});
