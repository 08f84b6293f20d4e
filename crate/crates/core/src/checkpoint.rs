//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! "MGCK" | u32 version | u64 header length | header JSON | payload
//! ```
//!
//! All integers are little-endian. The header lists each array's name, shape
//! and byte offset into the payload; array values are row-major
//! little-endian `f32`.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::trainer::{EpochRecord, Model, TrainConfig};

pub const MAGIC: &[u8; 4] = b"MGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: u64,
    history: Vec<EpochRecord>,
    arrays: Vec<ArrayEntry>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (name, value) in model.params.iter() {
        arrays.push(ArrayEntry { name: name.to_string(), shape: [value.nrows(), value.ncols()], offset: payload.len() });
        for x in value.iter() {
            payload.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    let header = Header { config: model.config.clone(), step: model.params.step(), history: model.history.clone(), arrays };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("missing MGCK header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Corrupt("header extends past end of file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    let payload = &bytes[header_end..];

    let mut expected = 0usize;
    let mut params = ParamStore::new();
    for entry in &header.arrays {
        let n = entry.shape[0] * entry.shape[1];
        let end = entry.offset + 4 * n;
        if end > payload.len() {
            return Err(Error::Corrupt(format!("array {} needs {} bytes, payload has {}", entry.name, end, payload.len())));
        }
        let values: Vec<f64> = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let value = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), values).map_err(|e| Error::Corrupt(e.to_string()))?;
        params.insert(entry.name.clone(), value);
        expected += 4 * n;
    }
    if expected != payload.len() {
        return Err(Error::Corrupt(format!("payload has {} bytes, arrays account for {}", payload.len(), expected)));
    }
    params.set_step(header.step);
    Ok(Model { config: header.config, params, history: header.history })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
