//! Synthetic rated corpus: clean sources, every (kind, level) degradation of
//! each, a source-disjoint train/dev/test split and a pool of clean
//! non-matching references.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::audio::{normalize_samples, write_wav, AudioClip, AudioError, TARGET_DBFS};
use crate::manifest::{write_manifest, ManifestEntry, ManifestError, Split, CLEAN_SYSTEM};
use crate::synth::{degrade, synth_clean, DegradationKind, DegradationSpec, SynthError, LEVELS};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const WAV_DIR: &str = "wav";
pub const NMR_DIR: &str = "nmr";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{0} must be positive")]
    ZeroCount(&'static str),
    #[error("split fractions must be in [0, 1] and sum to at most 1")]
    BadFractions,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Clean sources; each contributes one clip per (kind, level) plus itself.
    pub sources: usize,
    pub kinds: Vec<DegradationKind>,
    pub duration_s: f64,
    /// Extra clean clips written under `nmr/`, not in the manifest.
    pub nmr_count: usize,
    pub train_fraction: f64,
    pub dev_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            out_dir: PathBuf::from("corpus"),
            seed: 0,
            sources: 40,
            kinds: DegradationKind::ALL.to_vec(),
            duration_s: 4.0,
            nmr_count: 100,
            train_fraction: 0.65,
            dev_fraction: 0.10,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources == 0 {
            return Err(CorpusError::ZeroCount("sources"));
        }
        if self.kinds.is_empty() {
            return Err(CorpusError::ZeroCount("kinds"));
        }
        if !(self.duration_s > 0.0) {
            return Err(CorpusError::ZeroCount("duration_s"));
        }
        let (t, d) = (self.train_fraction, self.dev_fraction);
        if !((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&d) && t + d <= 1.0) {
            return Err(CorpusError::BadFractions);
        }
        Ok(())
    }

    /// Split of each source index, drawn by a seeded shuffle.
    pub fn source_splits(&self) -> Vec<Split> {
        let mut order: Vec<usize> = (0..self.sources).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(clip_seed(self.seed, "split")));
        let n_train = (self.train_fraction * self.sources as f64).round() as usize;
        let n_dev = ((self.dev_fraction * self.sources as f64).round() as usize).min(self.sources - n_train.min(self.sources));
        let mut splits = vec![Split::Test; self.sources];
        for (rank, &src) in order.iter().enumerate() {
            splits[src] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
        }
        splits
    }
}

/// 64-bit FNV-1a over the seed bytes and the id.
pub fn clip_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn source_id(index: usize) -> String {
    format!("s{index:03}")
}

pub fn nmr_id(index: usize) -> String {
    format!("nmr{index:04}")
}

/// Level index encoded in a degraded system id such as `reverb_L7`.
pub fn level_of_system(system_id: &str) -> Option<u8> {
    let (_, level) = system_id.rsplit_once("_L")?;
    level.parse().ok().filter(|&l| l < LEVELS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub entries: Vec<ManifestEntry>,
    /// Paths of the reference clips, relative to `out_dir`.
    pub nmr_paths: Vec<String>,
}

struct Planned {
    entry: ManifestEntry,
    clip: AudioClip,
}

fn plan_source(cfg: &CorpusConfig, index: usize, split: Split) -> Result<Vec<Planned>> {
    let src = source_id(index);
    let clean = synth_clean(clip_seed(cfg.seed, &src), cfg.duration_s)?;
    let mut out = Vec::with_capacity(1 + cfg.kinds.len() * LEVELS as usize);
    let id = format!("{src}_clean");
    out.push(Planned {
        entry: ManifestEntry {
            path: format!("{WAV_DIR}/{id}.wav"),
            mos: 5.0,
            system_id: CLEAN_SYSTEM.into(),
            utterance_id: id,
            split,
        },
        clip: clean.clone(),
    });
    for &kind in &cfg.kinds {
        for level in 0..LEVELS {
            let id = format!("{src}_{kind}_L{level}");
            let spec = DegradationSpec::new(kind, level, clip_seed(cfg.seed, &id))?;
            let degraded = degrade(&clean, &spec)?;
            let (samples, _) = normalize_samples(degraded.samples(), TARGET_DBFS)?;
            out.push(Planned {
                entry: ManifestEntry {
                    path: format!("{WAV_DIR}/{id}.wav"),
                    mos: spec.mos(),
                    system_id: spec.system_id(),
                    utterance_id: id,
                    split,
                },
                clip: AudioClip::new(samples, degraded.sample_rate())?,
            });
        }
    }
    Ok(out)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes all WAVs and `manifest.jsonl` under `cfg.out_dir`. Every clip's
/// randomness derives from (seed, utterance id), so output does not depend
/// on scheduling.
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    create_dir(&cfg.out_dir.join(WAV_DIR))?;
    if cfg.nmr_count > 0 {
        create_dir(&cfg.out_dir.join(NMR_DIR))?;
    }
    let splits = cfg.source_splits();
    let per_source: Vec<Vec<ManifestEntry>> = (0..cfg.sources)
        .into_par_iter()
        .map(|i| {
            let planned = plan_source(cfg, i, splits[i])?;
            planned
                .into_iter()
                .map(|p| {
                    write_wav(cfg.out_dir.join(&p.entry.path), &p.clip)?;
                    Ok(p.entry)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let nmr_paths = (0..cfg.nmr_count)
        .into_par_iter()
        .map(|i| {
            let id = nmr_id(i);
            let clip = synth_clean(clip_seed(cfg.seed, &id), cfg.duration_s)?;
            let rel = format!("{NMR_DIR}/{id}.wav");
            write_wav(cfg.out_dir.join(&rel), &clip)?;
            Ok(rel)
        })
        .collect::<Result<Vec<_>>>()?;
    let entries: Vec<ManifestEntry> = per_source.into_iter().flatten().collect();
    write_manifest(cfg.out_dir.join(MANIFEST_FILE), &entries)?;
    Ok(Corpus { entries, nmr_paths })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_is_26_4_10() {
        let splits = CorpusConfig::default().source_splits();
        let count = |s| splits.iter().filter(|&&x| x == s).count();
        assert_eq!((count(Split::Train), count(Split::Dev), count(Split::Test)), (26, 4, 10));
    }

    #[test]
    fn seeds_depend_on_id_and_seed() {
        assert_ne!(clip_seed(0, "a"), clip_seed(0, "b"));
        assert_ne!(clip_seed(0, "a"), clip_seed(1, "a"));
        assert_eq!(clip_seed(3, "s001"), clip_seed(3, "s001"));
    }

    #[test]
    fn system_level_parsing() {
        assert_eq!(level_of_system("reverb_L7"), Some(7));
        assert_eq!(level_of_system("additive_noise_L0"), Some(0));
        assert_eq!(level_of_system("clean"), None);
        assert_eq!(level_of_system("clip_L12"), None);
    }

    #[test]
    fn zero_counts_are_rejected() {
        let cfg = CorpusConfig {
            sources: 0,
            ..CorpusConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(CorpusError::ZeroCount("sources"))));
        let cfg = CorpusConfig {
            kinds: vec![],
            ..CorpusConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn small_corpus_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = |sub: &str| CorpusConfig {
            out_dir: dir.path().join(sub),
            seed: 9,
            sources: 3,
            duration_s: 0.25,
            nmr_count: 2,
            ..CorpusConfig::default()
        };
        let a = gen_corpus(&cfg("a")).unwrap();
        gen_corpus(&cfg("b")).unwrap();
        assert_eq!(a.entries.len(), 3 * 41);
        assert_eq!(a.entries.iter().filter(|e| e.is_clean()).count(), 3);
        assert_eq!(a.nmr_paths.len(), 2);
        let read = |sub: &str, f: &str| fs::read(dir.path().join(sub).join(f)).unwrap();
        assert_eq!(read("a", MANIFEST_FILE), read("b", MANIFEST_FILE));
        assert_eq!(read("a", &a.entries[7].path), read("b", &a.entries[7].path));
        // one split per source
        for chunk in a.entries.chunks(41) {
            assert!(chunk.iter().all(|e| e.split == chunk[0].split));
        }
    }

    #[test]
    fn unwritable_directory_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let cfg = CorpusConfig {
            out_dir: blocker.join("sub"),
            sources: 1,
            ..CorpusConfig::default()
        };
        let err = gen_corpus(&cfg).unwrap_err();
        assert!(err.to_string().contains("file/sub"), "{err}");
    }
}
