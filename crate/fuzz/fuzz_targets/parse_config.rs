#![no_main]

use lbbsp_core::config::ScenarioConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ScenarioConfig::from_json_str(text) {
        let again = ScenarioConfig::from_json_str(&cfg.to_json()).expect("serialised config parses");
        assert_eq!(again.to_json(), cfg.to_json());
    }
});
