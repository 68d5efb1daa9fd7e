//! Versioned binary checkpoints.
//!
//! Layout: the magic bytes, a little-endian `u32` format version, a `u64`
//! header length, a JSON header, then every tensor's values as little-endian
//! `f32` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::config::DsrConfig;
use crate::error::{DsrError, Result};
use crate::nets::DsrModel;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where an interrupted stage stood when the checkpoint was written.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub stage: u8,
    /// Iterations finished.
    pub iteration: usize,
    pub rng_seed: u64,
    /// Word position of the ChaCha stream, in decimal.
    pub rng_word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stages_completed: u8,
    config: DsrConfig,
    progress: Option<TrainProgress>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// A model restored from disk with the configuration it was trained under.
pub struct Checkpoint {
    pub model: DsrModel,
    pub config: DsrConfig,
    pub progress: Option<TrainProgress>,
}

pub fn encode_checkpoint(model: &DsrModel, config: &DsrConfig, progress: Option<&TrainProgress>) -> Result<Vec<u8>> {
    let values = model.params().snapshot()?;
    let tensors = model
        .params()
        .iter()
        .map(|(name, var)| TensorEntry {
            name: name.clone(),
            shape: var.dims().to_vec(),
        })
        .collect();
    let mut config = config.clone();
    config.model = model.config().clone();
    let header = Header {
        stages_completed: model.stages_completed(),
        config,
        progress: progress.cloned(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| DsrError::CorruptCheckpoint(e.to_string()))?;
    let payload: usize = values.values().map(Vec::len).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 4 * payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values.values() {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], device: &Device) -> Result<Checkpoint> {
    let corrupt = |m: &str| DsrError::CorruptCheckpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(DsrError::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|n| n.checked_add(20))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let mut header: Header =
        serde_json::from_slice(&bytes[20..hend]).map_err(|e| DsrError::CorruptCheckpoint(format!("header: {e}")))?;
    header.config.fix_stage_ids();
    header.config.validate().map_err(|e| DsrError::CorruptCheckpoint(format!("stored config: {e}")))?;

    let mut payload = &bytes[hend..];
    let mut values = BTreeMap::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        if payload.len() < 4 * n {
            return Err(corrupt("payload truncated"));
        }
        let v = payload[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect::<Vec<_>>();
        payload = &payload[4 * n..];
        values.insert(t.name.clone(), v);
    }
    if !payload.is_empty() {
        return Err(corrupt("trailing bytes after payload"));
    }

    let mut model = DsrModel::new(&header.config.model, 0, device)?;
    for t in &header.tensors {
        match model.params().get(&t.name) {
            Some(var) if var.dims() == t.shape.as_slice() => {}
            Some(var) => {
                return Err(DsrError::CorruptCheckpoint(format!(
                    "{}: stored shape {:?}, model expects {:?}",
                    t.name,
                    t.shape,
                    var.dims()
                )))
            }
            None => return Err(DsrError::CorruptCheckpoint(format!("unknown tensor {}", t.name))),
        }
    }
    model.params().restore(&values)?;
    model.set_stages_completed(header.stages_completed)?;
    Ok(Checkpoint {
        model,
        config: header.config,
        progress: header.progress,
    })
}

/// Writes a sibling `.partial` file and renames it over `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &DsrModel,
    config: &DsrConfig,
    progress: Option<&TrainProgress>,
) -> Result<()> {
    let bytes = encode_checkpoint(model, config, progress)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".partial");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| DsrError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| DsrError::io(&tmp, e))?;
    f.sync_all().map_err(|e| DsrError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| DsrError::io(path, e))
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| DsrError::io(path, e))?;
    decode_checkpoint(&bytes, device)
}
