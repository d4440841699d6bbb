#![no_main]

use glimpse_pad::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::from_toml_str(text, &[]) {
            // Whatever parses must survive a round trip through its own serialization.
            let again = toml::to_string(&cfg).expect("serializable");
            ExperimentConfig::from_toml_str(&again, &[]).expect("round trip");
        }
    }
});
