#![no_main]

use fedflow_core::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

// Config parsing must never panic, and any accepted config must survive an
// echo/reparse round trip.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(config) = ExperimentConfig::from_text(text) else {
        return;
    };
    let back = ExperimentConfig::from_text(&config.to_text())
        .expect("echoed config must reparse");
    assert_eq!(config, back);
});
