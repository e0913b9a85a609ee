//! Checkpoint container.
//!
//! ```text
//! b"OCTCKPT1" | header length (u64 LE) | JSON header | f32 LE arrays
//! ```
//!
//! The header carries the model config, class order, the full layer graph
//! and, per array, its name, shape, byte offset and SHA-256.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_model, Architecture, ModelConfig, ModelHandle};
use crate::nn::{Network, Node, NodeId, Param};
use crate::{ClassLabel, Error, Result};

const MAGIC: &[u8; 8] = b"OCTCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    class_order: Vec<ClassLabel>,
    layers: Vec<Node>,
    output: NodeId,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
    len: usize,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint(model: &ModelHandle, path: impl AsRef<Path>) -> Result<()> {
    let mut payload = Vec::new();
    let mut arrays = Vec::new();
    for p in model.network().params() {
        let offset = payload.len();
        for v in &p.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        arrays.push(ArrayEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            trainable: p.trainable,
            offset,
            len: p.data.len(),
            sha256: sha256_hex(&payload[offset..]),
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        class_order: model.class_order().to_vec(),
        layers: model.network().nodes().to_vec(),
        output: model.network().output_id(),
        arrays,
    };
    let header = serde_json::to_vec(&header)?;
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(&payload)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelHandle> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::ChecksumMismatch("not a checkpoint file (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::ChecksumMismatch("header truncated".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::ChecksumMismatch(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::ConfigMismatch(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let payload = &bytes[header_end..];

    let mut params = Vec::with_capacity(header.arrays.len());
    for a in &header.arrays {
        let end = a.offset + a.len * 4;
        if end > payload.len() {
            return Err(Error::ChecksumMismatch(format!("payload truncated inside array {:?}", a.name)));
        }
        let raw = &payload[a.offset..end];
        if sha256_hex(raw) != a.sha256 {
            return Err(Error::ChecksumMismatch(format!("array {:?} is corrupt", a.name)));
        }
        params.push(Param {
            name: a.name.clone(),
            shape: a.shape.clone(),
            data: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            trainable: a.trainable,
        });
    }

    let config = header.config;
    config.validate()?;
    if header.class_order != config.class_order() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint class order {:?} is not the canonical order",
            header.class_order
        )));
    }
    if config.architecture != Architecture::Custom {
        let reference = build_model(&config)?;
        if reference.network().nodes() != header.layers.as_slice() {
            return Err(Error::ConfigMismatch(format!(
                "layer graph does not match a {} built from the embedded config",
                config.architecture
            )));
        }
    }
    let network = Network::from_parts(header.layers, params, header.output)
        .map_err(|e| Error::ConfigMismatch(e.to_string()))?;
    ModelHandle::from_network(config, network)
}

/// SHA-256 of the whole checkpoint file, hex encoded.
pub fn checkpoint_digest(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, ModelConfig};

    fn tiny() -> ModelHandle {
        build_model(&ModelConfig::new(Architecture::TinyCnn).with_seed(11)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.network().params(), m.network().params());
        assert_eq!(back.class_order(), ClassLabel::ALL.as_slice());
        let px: Vec<f32> = (0..crate::IMAGE_LEN).map(|i| (i % 97) as f32 / 97.0).collect();
        assert_eq!(m.forward_pixels(&px, 1).unwrap(), back.forward_pixels(&px, 1).unwrap());
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&tiny(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::ChecksumMismatch(_))));
    }

    #[test]
    fn flipped_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&tiny(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 7] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::ChecksumMismatch(_))));
    }

    #[test]
    fn tampered_config_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&tiny(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        header["config"]["width_multiplier"] = serde_json::json!(0.5);
        let header = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&bytes[16 + len..]);
        fs::write(&path, out).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_checkpoint("/nonexistent/x.ckpt"), Err(Error::Io(_))));
    }
}
