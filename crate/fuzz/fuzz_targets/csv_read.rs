#![no_main]

use libfuzzer_sys::fuzz_target;
use viable_core::report::{csv_string, parse_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = parse_csv(text) {
        if rows.is_empty() {
            return;
        }
        let out = csv_string(&rows).expect("parsed rows serialize");
        assert_eq!(parse_csv(&out).unwrap(), rows);
    }
});
