#![no_main]
use libfuzzer_sys::fuzz_target;
use slt_core::pipeline::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_toml(text) {
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).expect("config round trip");
        assert_eq!(back.hash(), cfg.hash());
    }
});
