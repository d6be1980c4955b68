#![no_main]

use libfuzzer_sys::fuzz_target;
use nmrmos::checkpoint::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint(data) {
        let again = decode_checkpoint(&encode_checkpoint(&ck)).expect("re-encoded checkpoint decodes");
        assert_eq!(again, ck);
    }
});
