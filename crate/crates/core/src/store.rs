//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CMIVLD01"
//! version  u16      1
//! config   u32 byte length, then UTF-8 JSON of a ModelConfig or PurifierConfig
//! count    u32      number of arrays
//! arrays   per array: u32 name length, name bytes, u32 rank,
//!          rank × u32 dims, product(dims) × f32 values
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TinyLvlmParams};
use crate::purifier::{Purifier, PurifierConfig, PurifierParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CMIVLD01";
pub const VERSION: u16 = 1;

/// The config stored in a checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CheckpointConfig {
    Model(ModelConfig),
    Purifier(PurifierConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub arrays: Vec<(String, Tensor)>,
}

/// Serializes a checkpoint to bytes.
pub fn encode(config: &CheckpointConfig, arrays: &[(String, Tensor)]) -> Vec<u8> {
    let json = serde_json::to_vec(config).expect("config serializes");
    let payload: usize = arrays.iter().map(|(n, t)| 8 + n.len() + 4 * (t.rank() + t.len())).sum();
    let mut out = Vec::with_capacity(18 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r
        .take(8, "magic")
        .map_err(|_| Error::UnsupportedFormat("file too short for a checkpoint header".into()))?;
    if magic != MAGIC {
        return Err(Error::UnsupportedFormat(format!("unknown magic {magic:?}")));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "checkpoint version {version}, reader supports {VERSION}"
        )));
    }
    let json_len = r.u32("config length")? as usize;
    let config: CheckpointConfig = serde_json::from_slice(r.take(json_len, "config")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config block: {e}")))?;
    let count = r.u32("array count")? as usize;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::CorruptCheckpoint("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("array {name} dims overflow")))?;
        let raw = r.take(
            len.checked_mul(4)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("array {name} too large")))?,
            "values",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        arrays.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes after the last array",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { config, arrays })
}

/// Writes a checkpoint and syncs it to disk before returning.
pub fn save(path: &Path, config: &CheckpointConfig, arrays: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(config, arrays);
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&bytes)?;
        let file = w.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_model(path: &Path, config: &ModelConfig, params: &TinyLvlmParams) -> Result<()> {
    save(path, &CheckpointConfig::Model(config.clone()), &params.named())
}

/// Loads model weights, checking every array against the stored config.
pub fn load_model(path: &Path) -> Result<(ModelConfig, TinyLvlmParams)> {
    match load(path)? {
        Checkpoint {
            config: CheckpointConfig::Model(config),
            arrays,
        } => {
            config
                .validate()
                .map_err(|e| Error::CorruptCheckpoint(format!("stored config: {e}")))?;
            let params = TinyLvlmParams::from_named(&config, arrays)?;
            Ok((config, params))
        }
        _ => Err(Error::CorruptCheckpoint(format!(
            "{} holds a purifier, not a model",
            path.display()
        ))),
    }
}

pub fn save_purifier(path: &Path, purifier: &Purifier) -> Result<()> {
    save(
        path,
        &CheckpointConfig::Purifier(purifier.config.clone()),
        &purifier.params.named(),
    )
}

pub fn load_purifier(path: &Path) -> Result<Purifier> {
    match load(path)? {
        Checkpoint {
            config: CheckpointConfig::Purifier(config),
            arrays,
        } => {
            config
                .validate()
                .map_err(|e| Error::CorruptCheckpoint(format!("stored config: {e}")))?;
            let params = PurifierParams::from_named(&config, arrays)?;
            Ok(Purifier { config, params })
        }
        _ => Err(Error::CorruptCheckpoint(format!(
            "{} holds a model, not a purifier",
            path.display()
        ))),
    }
}
