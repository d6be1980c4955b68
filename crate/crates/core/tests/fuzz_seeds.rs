//! Replays the fuzz seed corpus, and byte-level mutations of it, through the
//! decoders with the same round-trip properties the fuzz targets assert.

use std::fs;
use std::path::PathBuf;

use nmrmos::audio::{decode_wav, encode_wav};
use nmrmos::checkpoint::{decode_checkpoint, encode_checkpoint};
use nmrmos::config::KvConfig;
use nmrmos::manifest::{parse_manifest, to_jsonl};
use nmrmos::predictions::parse_predictions;
use proptest::prelude::*;

const TARGETS: [&str; 5] = ["wav_decode", "checkpoint_decode", "manifest_line", "config_kv", "predictions_jsonl"];

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files.iter().map(|p| fs::read(p).unwrap()).collect()
}

fn exercise(target: &str, data: &[u8]) {
    let text = std::str::from_utf8(data).ok();
    match target {
        "wav_decode" => {
            if let Ok(clip) = decode_wav(data) {
                assert!(clip.samples().iter().all(|s| s.is_finite() && s.abs() <= 1.0));
                assert_eq!(decode_wav(&encode_wav(&clip)).unwrap().len(), clip.len());
            }
        }
        "checkpoint_decode" => {
            if let Ok(ck) = decode_checkpoint(data) {
                assert_eq!(decode_checkpoint(&encode_checkpoint(&ck)).unwrap(), ck);
            }
        }
        "manifest_line" => {
            if let Some(Ok(entries)) = text.map(parse_manifest) {
                assert_eq!(parse_manifest(&to_jsonl(&entries)).unwrap(), entries);
            }
        }
        "config_kv" => {
            if let Some(Ok(cfg)) = text.map(KvConfig::parse) {
                assert_eq!(KvConfig::parse(&cfg.to_string()).unwrap(), cfg);
            }
        }
        "predictions_jsonl" => {
            if let Some(Ok(preds)) = text.map(parse_predictions) {
                assert!(preds.iter().all(|p| (1.0..=5.0).contains(&p.estimate.mos)));
            }
        }
        other => panic!("unknown target {other}"),
    }
}

#[test]
fn every_target_has_seeds_and_valid_ones_parse() {
    for target in TARGETS {
        let all = seeds(target);
        assert!(!all.is_empty(), "{target}");
        for data in &all {
            exercise(target, data);
        }
    }
    assert!(decode_wav(&seeds("wav_decode")[0]).is_ok());
    assert!(decode_checkpoint(&seeds("checkpoint_decode")[1]).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mutated_seeds_never_panic(
        target in 0usize..TARGETS.len(),
        pick in any::<prop::sample::Index>(),
        edits in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8),
        cut in any::<prop::sample::Index>(),
    ) {
        let target = TARGETS[target];
        let all = seeds(target);
        let mut data = all[pick.index(all.len())].clone();
        for (at, byte) in edits {
            if !data.is_empty() {
                let i = at.index(data.len());
                data[i] = byte;
            }
        }
        let keep = cut.index(data.len() + 1).max(data.len() / 2);
        data.truncate(keep);
        exercise(target, &data);
    }
}
