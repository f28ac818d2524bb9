#![no_main]

use adam_core::harness::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_toml(text) {
        let again = cfg.to_toml().expect("valid configs serialize");
        let reparsed = ExperimentConfig::from_toml(&again).expect("re-parse");
        assert_eq!(reparsed.to_toml().expect("re-serialize"), again);
    }
});
