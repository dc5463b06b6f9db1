#![no_main]

use gramsr_core::image::{decode_image, encode_png};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data) {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // anything we can read we can write back
        let png = encode_png(&img).expect("decoded images re-encode");
        let again = decode_image(&png).expect("own output decodes");
        assert_eq!(again.to_u8(), img.to_u8());
    }
});
