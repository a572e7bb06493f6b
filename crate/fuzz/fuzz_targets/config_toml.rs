#![no_main]

use libfuzzer_sys::fuzz_target;
use splitlora::harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Accepted configs must survive a serialize/parse round trip unchanged.
    if let Ok(cfg) = ExperimentConfig::from_toml_str(text) {
        let again = cfg.to_toml_string().expect("valid config serializes");
        let back = ExperimentConfig::from_toml_str(&again).expect("serialized config parses");
        assert_eq!(back, cfg);
    }
});
