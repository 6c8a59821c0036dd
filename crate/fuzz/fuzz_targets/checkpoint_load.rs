#![no_main]

use libfuzzer_sys::fuzz_target;
use viable_core::checkpoint::{decode_entries, Checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = decode_entries(data) {
        assert_eq!(decode_entries(&viable_core::checkpoint::encode_entries(&entries)).unwrap(), entries);
    }
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let bytes = ckpt.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
});
