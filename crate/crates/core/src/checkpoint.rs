//! Parameter checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"GRDOCKPT"  u32 version  u64 header_len  header (JSON)  payload (f64 LE)
//! ```
//!
//! The header records the model config, the init seed and, for every
//! parameter, its name, shape and element offset into the payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GRDOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub params: Vec<EntryHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
}

pub fn write_checkpoint<W: Write>(mut w: W, config: &ModelConfig, seed: u64, params: &ParamStore) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for p in params.iter() {
        entries.push(EntryHeader {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.len();
    }
    let header = CheckpointHeader {
        version: VERSION,
        config: config.clone(),
        seed,
        params: entries,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in params.iter() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::InvalidArgument(format!("checkpoint: {m}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let len = u64::from_le_bytes(u64buf) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(corrupt("payload is not a whole number of f64 values"));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = ParamStore::new();
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n;
        if end > floats.len() {
            return Err(corrupt(&format!("parameter `{}` runs past the payload", e.name)));
        }
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), floats[e.offset..end].to_vec())?)?;
    }
    Ok(Checkpoint {
        config: header.config,
        seed: header.seed,
        params,
    })
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, seed: u64, params: &ParamStore) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), config, seed, params)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
