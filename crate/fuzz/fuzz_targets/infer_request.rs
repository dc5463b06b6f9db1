#![no_main]

use gramsr_service::decode_infer_request;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((img, scales, _mode)) = decode_infer_request(data) {
        assert!(img.height() > 0 && img.width() > 0);
        assert!(scales.as_array().iter().all(|l| l.is_finite()));
    }
});
