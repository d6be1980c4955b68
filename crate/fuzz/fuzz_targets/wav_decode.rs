#![no_main]

use libfuzzer_sys::fuzz_target;
use nmrmos::audio::{decode_wav, encode_wav};

fuzz_target!(|data: &[u8]| {
    if let Ok(clip) = decode_wav(data) {
        assert!(clip.samples().iter().all(|s| s.is_finite() && s.abs() <= 1.0));
        let again = decode_wav(&encode_wav(&clip)).expect("re-encoded clip decodes");
        assert_eq!(again.len(), clip.len());
    }
});
