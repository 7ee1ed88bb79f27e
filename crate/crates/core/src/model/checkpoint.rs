use std::collections::BTreeMap;
use std::path::Path;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::{write_atomic, ByteReader};
use crate::kv::{self, KvMap};
use crate::nn::ParamStore;
use crate::tensor::{numel, Tensor};

const MAGIC: &[u8; 4] = b"LMRC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters, buffers and the resolved run configuration.
///
/// Layout (little-endian): magic, `u32` version, `u64` length plus canonical
/// `key=value` config text, then a parameter section and a buffer section.
/// Each section is a `u32` count of entries; an entry is a `u32` path length,
/// the path, a `u32` rank, `u64` extents and `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: KvMap,
    pub store: ParamStore,
}

impl Checkpoint {
    /// `config` must contain the `model.` keys; `init.seed` is filled in
    /// from the store.
    pub fn new(mut config: KvMap, store: ParamStore) -> Self {
        config.insert("init.seed".into(), store.init_seed().to_string());
        config
            .entry("init.scheme".into())
            .or_insert_with(|| "uniform_fan_in".into());
        Checkpoint { config, store }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_kv(&kv::section(&self.config, "model"))
            .map_err(|e| Error::Schema(format!("checkpoint config: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = kv::to_text(&self.config);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        write_section(&mut out, self.store.params());
        write_section(&mut out, self.store.buffers());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let schema = |what: &str| Error::Schema(format!("checkpoint truncated in {what}"));
        if r.take(4).map_err(|_| schema("magic"))? != MAGIC {
            return Err(Error::Schema("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32().map_err(|_| schema("version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let len = r.u64().map_err(|_| schema("config"))? as usize;
        let text = std::str::from_utf8(r.take(len).map_err(|_| schema("config"))?)
            .map_err(|_| Error::Schema("config text is not UTF-8".into()))?;
        let config = kv::parse(text).map_err(|e| Error::Schema(format!("config text: {e}")))?;
        let params = read_section(&mut r).map_err(|_| schema("parameters"))?;
        let buffers = read_section(&mut r).map_err(|_| schema("buffers"))?;
        if !r.is_empty() {
            return Err(Error::Schema("trailing bytes after checkpoint".into()));
        }
        let seed = kv::get(&config, "init.seed").map_err(|e| Error::Schema(e.to_string()))?;
        Ok(Checkpoint {
            config,
            store: ParamStore::from_parts(params, buffers, seed),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_section<'a>(out: &mut Vec<u8>, entries: impl Iterator<Item = (&'a str, &'a Tensor)>) {
    let entries: Vec<_> = entries.collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (path, t) in entries {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_section(r: &mut ByteReader) -> Result<BTreeMap<String, Tensor>> {
    let n = r.u32()?;
    let mut map = BTreeMap::new();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let path = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Schema("parameter path is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let data = (0..numel(&shape)).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Schema(format!("{path}: {e}")))?;
        if map.insert(path.clone(), t).is_some() {
            return Err(Error::Schema(format!("duplicate path {path}")));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Task;
    use crate::model::LmrCbt;

    fn sample_checkpoint() -> Checkpoint {
        let cfg = ModelConfig::tiny([3, 2, 2], Task::Sentiment);
        let store = LmrCbt::new(&cfg).unwrap().init_params(17).unwrap();
        Checkpoint::new(kv::prefixed(&cfg.to_kv(), "model"), store)
    }

    #[test]
    fn byte_identical_roundtrip() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.store, ck.store);
        assert_eq!(back.model_config().unwrap(), ck.model_config().unwrap());
        assert_eq!(back.config["init.seed"], "17");
    }

    #[test]
    fn corruption_is_schema_error() {
        let mut bytes = sample_checkpoint().to_bytes();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::Schema(_))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Schema(_))));
    }
}
