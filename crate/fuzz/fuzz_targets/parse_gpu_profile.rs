#![no_main]

use lbbsp_cli::parse_gpu_profile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = parse_gpu_profile(text) {
        assert!(p.x_s <= p.x_o);
        assert!(p.m > 0.0 && p.m.is_finite());
    }
});
