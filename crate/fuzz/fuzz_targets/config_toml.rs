#![no_main]

use libfuzzer_sys::fuzz_target;
use tunekit::TuneConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = TuneConfig::from_toml_str(text) else { return };
    let _ = cfg.feasible();
    let _ = cfg.initial_params();

    let written = cfg.to_toml_string();
    let again = TuneConfig::from_toml_str(&written).expect("serialized config reparses");
    assert_eq!(again.to_toml_string(), written);
});
