#![no_main]
use libfuzzer_sys::fuzz_target;
use weakpose::pipeline::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = TrainConfig::from_toml(text) {
        // accepted configs serialize back to an equal config
        let again = TrainConfig::from_toml(&config.to_toml()).expect("round trip");
        assert_eq!(config.to_toml(), again.to_toml());
    }
});
