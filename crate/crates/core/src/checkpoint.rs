//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NMRMOSCK"            8-byte magic
//! u32                   format version (1)
//! u32 + bytes           model config as JSON
//! u32 + bytes           free-form metadata as JSON
//! u32                   record count
//! per record:
//!   u32 + bytes         parameter name (UTF-8)
//!   u32                 rank
//!   u32 * rank          dimensions
//!   f32 * product(dims) values
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nmrmos_autograd::Tensor;
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError};

pub const MAGIC: &[u8; 8] = b"NMRMOSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint record {name}: {detail}")]
    Mismatch { name: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: serde_json::Value,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, meta: serde_json::Value) -> Self {
        let records = model
            .param_names()
            .into_iter()
            .zip(model.params())
            .map(|(name, tensor)| Record {
                name,
                tensor: tensor.clone(),
            })
            .collect();
        Checkpoint {
            config: model.config().clone(),
            meta,
            records,
        }
    }

    /// Rebuilds the model, checking every record against `expected` (the
    /// stored config when `None`).
    pub fn into_model(self, expected: Option<&ModelConfig>) -> Result<Model<f32>> {
        let config = expected.cloned().unwrap_or_else(|| self.config.clone());
        config.validate()?;
        let specs = config.param_specs();
        for (i, spec) in specs.iter().enumerate() {
            let Some(rec) = self.records.get(i) else {
                return Err(CheckpointError::Mismatch {
                    name: spec.name.clone(),
                    detail: "missing from checkpoint".into(),
                });
            };
            if rec.name != spec.name || rec.tensor.shape() != spec.shape.as_slice() {
                return Err(CheckpointError::Mismatch {
                    name: rec.name.clone(),
                    detail: format!(
                        "expected {} with shape {:?}, found shape {:?}",
                        spec.name,
                        spec.shape,
                        rec.tensor.shape()
                    ),
                });
            }
        }
        if let Some(extra) = self.records.get(specs.len()) {
            return Err(CheckpointError::Mismatch {
                name: extra.name.clone(),
                detail: "not part of the model".into(),
            });
        }
        let params = self.records.into_iter().map(|r| r.tensor).collect();
        Ok(Model::from_params(config, params)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits u32").to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend_from_slice(b);
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, serde_json::to_string(&ck.config).expect("config serializes").as_bytes());
    put_bytes(&mut out, serde_json::to_string(&ck.meta).expect("meta serializes").as_bytes());
    put_u32(&mut out, ck.records.len());
    for r in &ck.records {
        put_bytes(&mut out, r.name.as_bytes());
        put_u32(&mut out, r.tensor.shape().len());
        for &d in r.tensor.shape() {
            put_u32(&mut out, d);
        }
        for v in r.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            CheckpointError::Corrupt(format!("truncated {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)?;
        self.take(n, what)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn json<T: serde::de::DeserializeOwned>(bytes: &[u8], what: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| CheckpointError::Corrupt(format!("{what}: {e}")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config: ModelConfig = json(r.bytes("config")?, "config")?;
    let meta: serde_json::Value = json(r.bytes("metadata")?, "metadata")?;
    let count = r.u32("record count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let name = std::str::from_utf8(r.bytes("record name")?)
            .map_err(|_| CheckpointError::Corrupt("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("record {name}: rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| CheckpointError::Corrupt(format!("record {name}: truncated values")))?;
        let raw = r.take(n * 4, "values")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::Corrupt(format!("record {name}: non-finite value")));
        }
        let tensor = Tensor::new(&dims, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        records.push(Record { name, tensor });
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Checkpoint { config, meta, records })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ck)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    load_checkpoint(path)?.into_model(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model<f32> {
        Model::new(ModelConfig::reduced(5)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let model = small();
        let ck = Checkpoint::from_model(&model, serde_json::json!({"epoch": 3}));
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back), bytes);
        assert_eq!(back.into_model(None).unwrap(), model);
    }

    #[test]
    fn truncation_is_reported_as_corrupt() {
        let bytes = encode_checkpoint(&Checkpoint::from_model(&small(), serde_json::Value::Null));
        for cut in [0, 5, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().starts_with("corrupt checkpoint"), "{cut}: {err}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = encode_checkpoint(&Checkpoint::from_model(&small(), serde_json::Value::Null));
        bytes[8] = 2;
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::Version(2))));
    }

    #[test]
    fn config_mismatch_names_first_bad_record() {
        let ck = Checkpoint::from_model(&small(), serde_json::Value::Null);
        let mut other = ModelConfig::reduced(5);
        other.head_hidden = 9;
        let err = ck.into_model(Some(&other)).unwrap_err();
        assert!(err.to_string().starts_with("checkpoint record preference.hidden.weight"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = small();
        save_checkpoint(&path, &Checkpoint::from_model(&model, serde_json::json!({}))).unwrap();
        assert_eq!(load_model(&path).unwrap(), model);
        assert!(load_model(dir.path().join("missing")).unwrap_err().to_string().contains("missing"));
    }
}
