//! Line-delimited JSON manifest of rated clips.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    Line { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, ManifestError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

pub const CLEAN_SYSTEM: &str = "clean";

/// One rated clip. `path` is relative to the manifest's directory unless
/// absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub mos: f64,
    pub system_id: String,
    pub utterance_id: String,
    pub split: Split,
}

impl ManifestEntry {
    pub fn is_clean(&self) -> bool {
        self.system_id == CLEAN_SYSTEM
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Manifest {
            entries: parse_manifest(&text)?,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Parses one manifest line; `line` is 1-based and only used in errors.
pub fn parse_line(text: &str, line: usize) -> Result<ManifestEntry> {
    let entry: ManifestEntry = serde_json::from_str(text).map_err(|e| ManifestError::Line {
        line,
        msg: e.to_string(),
    })?;
    let bad = |msg: String| ManifestError::Line { line, msg };
    if !(1.0..=5.0).contains(&entry.mos) {
        return Err(bad(format!("mos {} outside [1, 5]", entry.mos)));
    }
    if entry.path.is_empty() {
        return Err(bad("empty path".into()));
    }
    if entry.utterance_id.is_empty() || entry.system_id.is_empty() {
        return Err(bad("empty utterance_id or system_id".into()));
    }
    if entry.system_id == CLEAN_SYSTEM && entry.mos != 5.0 {
        return Err(bad(format!("clean entry with mos {}", entry.mos)));
    }
    Ok(entry)
}

/// Parses a whole manifest; blank lines are skipped, utterance ids must be
/// unique.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let entry = parse_line(raw, i + 1)?;
        if !seen.insert(entry.utterance_id.clone()) {
            return Err(ManifestError::Line {
                line: i + 1,
                msg: format!("duplicate utterance_id {:?}", entry.utterance_id),
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn to_jsonl(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(entries)).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, mos: f64, system: &str) -> ManifestEntry {
        ManifestEntry {
            path: format!("wav/{id}.wav"),
            mos,
            system_id: system.into(),
            utterance_id: id.into(),
            split: Split::Test,
        }
    }

    #[test]
    fn round_trip() {
        let entries = vec![entry("a", 5.0, "clean"), entry("b", 2.5, "lowpass_L4")];
        let text = to_jsonl(&entries);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_manifest(&text).unwrap(), entries);
    }

    #[test]
    fn errors_name_the_line() {
        let good = serde_json::to_string(&entry("a", 3.0, "x")).unwrap();
        let text = format!("{good}\n\n{{\"path\": 3}}\n");
        let err = parse_manifest(&text).unwrap_err();
        assert!(matches!(err, ManifestError::Line { line: 3, .. }), "{err}");
        assert!(err.to_string().starts_with("manifest line 3:"));
    }

    #[test]
    fn invalid_entries_are_rejected() {
        for bad in [entry("a", 5.5, "x"), entry("a", 4.0, "clean"), entry("", 3.0, "x")] {
            let line = serde_json::to_string(&bad).unwrap();
            assert!(parse_line(&line, 1).is_err(), "{line}");
        }
        let text = to_jsonl(&[entry("a", 3.0, "x"), entry("a", 2.0, "y")]);
        assert!(parse_manifest(&text).unwrap_err().to_string().contains("duplicate"));
        assert!(parse_line(r#"{"path":"a","mos":3,"system_id":"x","utterance_id":"a","split":"val"}"#, 1).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&path, &[entry("a", 3.0, "x")]).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.resolve(&m.entries[0]), dir.path().join("wav/a.wav"));
        assert_eq!(m.split(Split::Test).count(), 1);
        assert_eq!(m.split(Split::Train).count(), 0);
    }
}
