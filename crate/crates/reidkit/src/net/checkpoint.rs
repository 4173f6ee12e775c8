//! Binary checkpoint container for model parameters and normalization
//! buffers. Layout: 4-byte magic, u64 LE header length, JSON header (model
//! configuration, its fingerprint and per-entry names/shapes), then all entry
//! values concatenated as f32 little-endian.

use std::io::{Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::model::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"RKPT";

#[derive(Debug, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    fingerprint: String,
    epoch: usize,
    entries: Vec<EntryMeta>,
}

/// Hex digest identifying an architecture; embedding archives record it so a
/// checkpoint and the embeddings it produced can be matched up.
pub fn config_fingerprint(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn save(model: &Model, epoch: usize, path: &Path) -> Result<()> {
    let entries = model.state_entries();
    let header = Header {
        config: model.cfg.clone(),
        fingerprint: config_fingerprint(&model.cfg),
        epoch,
        entries: entries
            .iter()
            .map(|(name, shape, _)| EntryMeta {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_u64::<LittleEndian>(header_json.len() as u64)?;
    file.write_all(&header_json)?;
    for (_, _, values) in &entries {
        for &v in values {
            file.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Loads a checkpoint into a freshly built model; returns the model and the
/// epoch at which it was saved. The stored configuration is authoritative.
pub fn load(path: &Path) -> Result<(Model, usize)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let header_len = file.read_u64::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.fingerprint != config_fingerprint(&header.config) {
        return Err(Error::Checkpoint(format!(
            "{}: fingerprint does not match stored configuration",
            path.display()
        )));
    }
    let mut entries = Vec::with_capacity(header.entries.len());
    for meta in &header.entries {
        let count: usize = meta.shape.iter().product();
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(file.read_f32::<LittleEndian>()? as f64);
        }
        entries.push((meta.name.clone(), meta.shape.clone(), values));
    }
    let mut model = Model::new(header.config, 0);
    model.load_state(&entries)?;
    Ok((model, header.epoch))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            input_h: 16,
            input_w: 8,
            channels: [4, 6, 8],
            strides: [2, 2, 1],
            part_count: 3,
            num_train_ids: 5,
        }
    }

    #[test]
    fn fingerprint_distinguishes_configs() {
        let a = config_fingerprint(&small_cfg());
        let b = config_fingerprint(&ModelConfig {
            part_count: 4,
            ..small_cfg()
        });
        assert_ne!(a, b);
        assert_eq!(a, config_fingerprint(&small_cfg()));
    }

    #[test]
    fn save_load_round_trip_preserves_state_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::new(small_cfg(), 7);
        save(&model, 12, &path).unwrap();
        let (loaded, epoch) = load(&path).unwrap();
        assert_eq!(epoch, 12);
        assert_eq!(loaded.cfg, model.cfg);
        for ((n1, s1, v1), (n2, s2, v2)) in model
            .state_entries()
            .iter()
            .zip(loaded.state_entries().iter())
        {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            for (a, b) in v1.iter().zip(v2.iter()) {
                assert_eq!(*a as f32, *b as f32, "{n1} changed beyond f32 rounding");
            }
        }
    }

    #[test]
    fn rejects_non_checkpoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
