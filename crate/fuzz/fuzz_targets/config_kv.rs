#![no_main]

use libfuzzer_sys::fuzz_target;
use nmrmos::config::KvConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = KvConfig::parse(text) {
        assert_eq!(KvConfig::parse(&cfg.to_string()).expect("round trip"), cfg);
    }
});
