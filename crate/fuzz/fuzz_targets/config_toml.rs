#![no_main]

use dcpsim::experiment::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let Ok(cfg) = ExperimentConfig::from_toml_str(data) else {
        return;
    };
    let _ = cfg.validate();
    // serialization must be a fixed point after one round
    let Ok(once) = cfg.to_toml_string() else { return };
    let twice = ExperimentConfig::from_toml_str(&once)
        .unwrap()
        .to_toml_string()
        .unwrap();
    assert_eq!(once, twice);
});
