#![no_main]

use lbbsp_core::trace::{parse_trace_str, write_traces};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(traces) = parse_trace_str(text) {
        // accepted input must survive a write/parse round trip
        let again = parse_trace_str(&write_traces(&traces)).expect("written traces parse");
        assert_eq!(again, traces);
    }
});
