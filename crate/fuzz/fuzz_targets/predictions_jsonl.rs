#![no_main]

use libfuzzer_sys::fuzz_target;
use nmrmos::predictions::parse_predictions;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(preds) = parse_predictions(text) {
        assert!(preds.iter().all(|p| (1.0..=5.0).contains(&p.estimate.mos)));
    }
});
