#![no_main]

use libfuzzer_sys::fuzz_target;
use subuda::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(config) = TrainConfig::from_json(text) else { return };
    let _ = config.validate(3);
    let again = TrainConfig::from_json(&config.to_json().expect("serializing")).expect("re-parsing");
    assert_eq!(format!("{config:?}"), format!("{again:?}"));
});
