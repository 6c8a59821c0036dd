#![no_main]

use libfuzzer_sys::fuzz_target;
use viable_core::config::parse_config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = parse_config(text) {
        let echo = config.to_toml();
        let again = parse_config(&echo).expect("echo must parse");
        assert_eq!(again, config);
    }
});
