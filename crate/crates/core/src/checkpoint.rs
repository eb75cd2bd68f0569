//! Deterministic tar archives holding a model, its focus activations and
//! optionally the rehearsal memory.
//!
//! Layout:
//! - `config.json`: model configuration
//! - `params.json`: `[{name, shape, trainable}]` in store order
//! - `params/<index>.f32`: little-endian `f32` values, row-major
//! - `focus_active.bits`: one bit per class, least significant bit first
//! - `buffer/meta.json` and `buffer/images.u8`: memory snapshot, if present

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{CvtError, Result};
use crate::model::{CvtConfig, CvtModel};
use crate::replay::{BufferSnapshot, MemoryBuffer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

fn append(builder: &mut tar::Builder<Vec<u8>>, path: &str, data: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_path(path)?;
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(tar::EntryType::Regular);
    header.set_cksum();
    builder.append(&header, data)?;
    Ok(())
}

fn pack_bits(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &b) in mask.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], len: usize) -> Result<Vec<bool>> {
    if bytes.len() != len.div_ceil(8) {
        return Err(CvtError::Checkpoint("focus mask has the wrong length".into()));
    }
    Ok((0..len).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect())
}

/// Serializes the model (and memory, if given). Identical inputs produce
/// identical bytes.
pub fn save_checkpoint(model: &CvtModel, buffer: Option<&MemoryBuffer>) -> Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    append(&mut builder, "config.json", &serde_json::to_vec_pretty(model.config())?)?;
    let store = &model.store;
    let index: Vec<ParamEntry> = store
        .ids()
        .map(|id| ParamEntry {
            name: store.name(id).to_string(),
            shape: store.get(id).shape().to_vec(),
            trainable: store.is_trainable(id),
        })
        .collect();
    append(&mut builder, "params.json", &serde_json::to_vec_pretty(&index)?)?;
    for id in store.ids() {
        let bytes: Vec<u8> = store
            .get(id)
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        append(&mut builder, &format!("params/{}.f32", id.0), &bytes)?;
    }
    append(&mut builder, "focus_active.bits", &pack_bits(model.focuses.active_mask()))?;
    if let Some(buffer) = buffer {
        let snap = buffer.snapshot();
        append(&mut builder, "buffer/meta.json", &serde_json::to_vec_pretty(&snap)?)?;
        append(&mut builder, "buffer/images.u8", &snap.pixels)?;
    }
    Ok(builder.into_inner()?)
}

/// Rebuilds the model (and memory, if the archive holds one). Parameters
/// come back at `f32` precision.
pub fn load_checkpoint(bytes: &[u8]) -> Result<(CvtModel, Option<MemoryBuffer>)> {
    let mut files = std::collections::BTreeMap::new();
    let mut archive = tar::Archive::new(bytes);
    for entry in archive.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data)?;
        files.insert(path, data);
    }
    let take = |name: &str| {
        files
            .get(name)
            .ok_or_else(|| CvtError::Checkpoint(format!("missing entry {name}")))
    };
    let config: CvtConfig = serde_json::from_slice(take("config.json")?)?;
    let mut model = CvtModel::new(config, 0)?;
    let index: Vec<ParamEntry> = serde_json::from_slice(take("params.json")?)?;
    if index.len() != model.store.len() {
        return Err(CvtError::Checkpoint(format!(
            "{} stored parameters, model has {}",
            index.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&index) {
        let current = model.store.get(id);
        if model.store.name(id) != entry.name || current.shape() != entry.shape.as_slice() {
            return Err(CvtError::Checkpoint(format!("parameter {} does not match", entry.name)));
        }
        let raw = take(&format!("params/{}.f32", id.0))?;
        if raw.len() != 4 * current.len() {
            return Err(CvtError::Checkpoint(format!("parameter {} has the wrong size", entry.name)));
        }
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        *model.store.get_mut(id) = Tensor::from_vec(&entry.shape, values)?;
    }
    let classes = model.focuses.capacity();
    let mask = unpack_bits(take("focus_active.bits")?, classes)?;
    model.focuses_mut().set_active_mask(mask)?;
    let buffer = match files.get("buffer/meta.json") {
        Some(meta) => {
            let mut snap: BufferSnapshot = serde_json::from_slice(meta)?;
            snap.pixels = take("buffer/images.u8")?.clone();
            Some(MemoryBuffer::restore(&snap)?)
        }
        None => None,
    };
    Ok((model, buffer))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_round_trip() {
        let mask = vec![true, false, false, true, true, false, false, false, true, true];
        let packed = pack_bits(&mask);
        assert_eq!(packed, vec![0b0001_1001, 0b11]);
        assert_eq!(unpack_bits(&packed, mask.len()).unwrap(), mask);
        assert!(unpack_bits(&packed, 20).is_err());
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(load_checkpoint(b"not a tar archive").is_err());
    }
}
