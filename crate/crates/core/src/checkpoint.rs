//! Versioned tensor checkpoints: an 8-byte magic, a little-endian `u64`
//! header length, a JSON header describing every tensor, then the raw
//! little-endian `f32` payload.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FDIFCKPT";
pub const FORMAT: &str = "featsr-ckpt";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub payload_bytes: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` not in checkpoint")))
    }

    /// Tensors under `prefix.`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .header
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("metadata `{key}` missing")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

/// Prefixes every key with `prefix.`.
pub fn prefixed(prefix: &str, tensors: BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    tensors.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)).collect()
}

/// Writes atomically: the file appears under `path` only once complete.
pub fn save_checkpoint(
    tensors: &BTreeMap<String, Tensor>,
    path: impl AsRef<Path>,
    config_hash: &str,
    meta: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        if t.dtype() != DType::F32 {
            return Err(Error::Checkpoint(format!("tensor `{name}` is {:?}, payload is f32 only", t.dtype())));
        }
        let values: Vec<f32> = t.flatten_all()?.to_vec1()?;
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor `{name}` has non-finite value at {bad}")));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            dtype: "f32".into(),
            offset: payload.len() as u64,
        });
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config_hash: config_hash.into(),
        payload_bytes: payload.len() as u64,
        tensors: entries,
        meta,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..end])?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format tag `{}`", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} not supported (expected {VERSION})",
            header.version
        )));
    }
    Ok((header, end))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let (header, start) = read_header(&bytes)?;
    let payload = &bytes[start..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let mut tensors = BTreeMap::new();
    let mut expected = 0u64;
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected {
            return Err(Error::Checkpoint(format!("tensor `{}` at unexpected offset {}", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("tensor `{}` overruns payload", e.name)));
        }
        let values: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        expected = end as u64;
        if tensors
            .insert(e.name.clone(), Tensor::from_vec(values, e.shape.as_slice(), &Device::Cpu)?)
            .is_some()
        {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
        }
    }
    if expected != header.payload_bytes {
        return Err(Error::Checkpoint("payload has trailing bytes".into()));
    }
    Ok(Checkpoint { header, tensors })
}

/// Stable short hash of any serializable configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(cfg)?;
    Ok(hex::encode(&Sha256::digest(&json)[..8]))
}
