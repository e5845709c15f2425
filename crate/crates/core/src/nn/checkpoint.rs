//! Flat binary checkpoints.
//!
//! Layout: the 8-byte magic `UQSYNCK1`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then every parameter as little-endian
//! `f64`s in header order. Each header entry records the parameter name,
//! its shape and the byte offset of its first value relative to the start
//! of the data section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"UQSYNCK1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn write_params(mut w: impl Write, params: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let mut offset = 0u64;
    let entries = params
        .iter()
        .map(|p| {
            let e = ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += 8 * p.value.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        meta,
        params: entries,
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for p in params.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_params(mut r: impl Read) -> Result<(ParamStore, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;

    let mut store = ParamStore::new();
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        let bytes = data
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("parameter {} runs past end of file", e.name)))?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.push(e.name, Tensor::new(&e.shape, values)?)?;
    }
    Ok((store, header.meta))
}

impl UNet {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({ "unet": self.config() });
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        write_params(&mut w, self.params(), meta)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let (params, meta) = read_params(std::io::BufReader::new(file))?;
        let config: UNetConfig = serde_json::from_value(
            meta.get("unet")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint has no network config".into()))?,
        )?;
        UNet::with_params(config, params)
    }
}
