#![no_main]

use lbbsp_core::predictor::NarxModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = NarxModel::from_csv_str(text) {
        assert_eq!(
            NarxModel::from_csv_str(&model.to_csv()).expect("written weights parse"),
            model
        );
    }
});
