use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

use super::{ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "mmw-ckpt/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    dtype: String,
    params: Vec<Entry>,
    model_config: Value,
    data_config: Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

/// Parameters plus the configuration they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub model_config: Value,
    pub data_config: Value,
}

/// Layout: header length (u64 LE), JSON header, then every parameter as
/// little-endian f64 in header order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut offset = 0;
    let mut params = Vec::with_capacity(ckpt.store.len());
    for p in ckpt.store.iter() {
        params.push(Entry {
            name: p.name.clone(),
            shape: p.tensor.shape.clone(),
            offset,
            trainable: p.trainable,
        });
        offset += p.tensor.len();
    }
    let header = serde_json::to_vec(&Header {
        format: CHECKPOINT_FORMAT.into(),
        dtype: "f64".into(),
        params,
        model_config: ckpt.model_config.clone(),
        data_config: ckpt.data_config.clone(),
    })?;
    let mut bytes = Vec::with_capacity(8 + header.len() + 8 * offset);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for p in ckpt.store.iter() {
        for v in &p.tensor.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::format(path, detail);
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.dtype != "f64" {
        return Err(bad(&format!(
            "unsupported format {} / dtype {}",
            header.format, header.dtype
        )));
    }
    let blob = &bytes[8 + hlen..];
    let mut store = ParamStore::new();
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let raw = blob
            .get(8 * e.offset..8 * (e.offset + n))
            .ok_or_else(|| bad(&format!("data for {} out of bounds", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store
            .add(&e.name, Tensor::new(e.shape, data)?, e.trainable)
            .map_err(|err| match err {
                Error::InvalidArgument(d) => bad(&d),
                other => other,
            })?;
    }
    Ok(Checkpoint {
        store,
        model_config: header.model_config,
        data_config: header.data_config,
    })
}
