#![no_main]

use lbbsp_core::metrics::{parse_records_csv, Metrics};
use lbbsp_core::sim::Convergence;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_records_csv(text) {
        let m = Metrics::from_rows(&rows, &Convergence::default());
        assert!(m.updates as usize <= rows.len());
        assert!(m.wastage.is_nan() || (0.0..=1.0).contains(&m.wastage));
    }
});
