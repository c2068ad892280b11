#![no_main]

use libfuzzer_sys::fuzz_target;
use safelayer::experiment::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = ExperimentConfig::from_toml(text) {
        let again = ExperimentConfig::from_toml(&config.to_toml()).expect("printed config parses");
        assert_eq!(again.to_toml(), config.to_toml());
    }
});
