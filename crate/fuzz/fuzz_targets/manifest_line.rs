#![no_main]

use libfuzzer_sys::fuzz_target;
use nmrmos::manifest::{parse_manifest, to_jsonl};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_manifest(text) {
        assert_eq!(parse_manifest(&to_jsonl(&entries)).expect("round trip"), entries);
    }
});
