//! Resolution of effective settings: built-in defaults, then the config
//! file, then command-line flags.

use anyhow::{anyhow, bail, Context, Result};
use nmrmos::config::KvConfig;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

/// Every recognized key with its default. An empty default means the
/// setting is required or optional without a value.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("deterministic", "false"),
    ("corpus.out_dir", "corpus"),
    ("corpus.sources", "40"),
    ("corpus.kinds", "additive_noise,lowpass,clip,reverb"),
    ("corpus.duration_s", "4"),
    ("corpus.nmr_count", "100"),
    ("corpus.train_fraction", "0.65"),
    ("corpus.dev_fraction", "0.1"),
    ("train.manifest", ""),
    ("train.clean_manifest", ""),
    ("train.out_dir", "run"),
    ("train.batch_size", "64"),
    ("train.lr", "0.0001"),
    ("train.epochs", "50"),
    ("train.clean_fraction", "0.25"),
    ("train.lambda_q", "1"),
    ("train.pairs_per_epoch", ""),
    ("train.dev_nmrs", "5"),
    ("model.conv_channels", "48,48,48,48"),
    ("model.kernel_sizes", "10,8,4,4"),
    ("model.strides", "5,4,2,2"),
    ("model.head_hidden", "600"),
    ("predict.checkpoint", ""),
    ("predict.input", ""),
    ("predict.nmr", ""),
    ("predict.n", ""),
    ("predict.split", "test"),
    ("predict.signed", "false"),
    ("predict.output", "-"),
    ("evaluate.predictions", ""),
    ("evaluate.manifest", ""),
    ("evaluate.output", "-"),
    ("evaluate.scatter", ""),
    ("retrieve.checkpoint", ""),
    ("retrieve.manifest", ""),
    ("retrieve.k", "10"),
    ("retrieve.split", "test"),
    ("export.checkpoint", ""),
    ("export.manifest", ""),
    ("export.output", "-"),
    ("export.split", "test"),
];

pub struct Settings {
    kv: KvConfig,
    sections: Vec<&'static str>,
}

impl Settings {
    /// Defaults overlaid with `file` and then `flags`.
    pub fn resolve(file: Option<&PathBuf>, flags: KvConfig, sections: &[&'static str]) -> Result<Self> {
        let mut kv = KvConfig::default();
        for (k, v) in KEYS {
            kv.set(*k, *v);
        }
        if let Some(path) = file {
            let from_file = KvConfig::load(path)?;
            from_file.check_keys(&KEYS.iter().map(|k| k.0).collect::<Vec<_>>())?;
            kv = kv.merged(&from_file);
        }
        Ok(Settings {
            kv: kv.merged(&flags),
            sections: sections.to_vec(),
        })
    }

    fn raw(&self, key: &str) -> &str {
        self.kv.get_str(key).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.raw(key);
        if v.is_empty() {
            bail!("missing required setting {key}");
        }
        v.parse().map_err(|e: T::Err| anyhow!("setting {key}: cannot parse {v:?}: {e}"))
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.get::<String>(key).map(PathBuf::from)
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e: T::Err| anyhow!("setting {key}: cannot parse {s:?}: {e}")))
            .collect::<Result<Vec<T>>>()
            .with_context(|| format!("in list setting {key}"))
    }

    /// The settings this command uses, as a parseable config file.
    pub fn effective(&self) -> String {
        let mut out = KvConfig::default();
        for (k, _) in KEYS {
            let global = !k.contains('.');
            if global || self.sections.iter().any(|s| k.starts_with(&format!("{s}."))) {
                out.set(*k, self.raw(k));
            }
        }
        out.to_string()
    }
}

/// Builder for flag overrides; `None` flags are skipped.
#[derive(Default)]
pub struct Flags(KvConfig);

impl Flags {
    pub fn set<T: ToString>(mut self, key: &str, value: Option<T>) -> Self {
        if let Some(v) = value {
            self.0.set(key, v.to_string());
        }
        self
    }

    pub fn list<T: ToString>(self, key: &str, value: Option<Vec<T>>) -> Self {
        let joined = value.map(|v| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
        self.set(key, joined)
    }

    pub fn done(self) -> KvConfig {
        self.0
    }
}
