//! Binary checkpoints.
//!
//! Layout: the 8 magic bytes `VIMFCKPT`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then every parameter as little-endian `f64`
//! in manifest order. Each manifest entry carries the tensor's byte offset
//! into the payload and an FNV-1a checksum of its bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::fnv1a64;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VIMFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub checksum: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub seed: u64,
    pub config: serde_json::Value,
    pub manifest: Vec<ManifestEntry>,
}

/// A decoded checkpoint whose bytes have been fully validated.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Serializes the model's config, seed and every parameter.
pub fn encode(model: &Model) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut manifest = Vec::new();
    for p in model.store.iter() {
        let bytes = tensor_bytes(&p.tensor);
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset: payload.len() as u64,
            checksum: fnv1a64(&bytes),
            trainable: p.trainable,
        });
        payload.extend_from_slice(&bytes);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        seed: model.store.seed(),
        config: serde_json::to_value(&model.cfg).expect("config serializes"),
        manifest,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

fn header_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Header(msg.into())
}

/// Parses and validates raw checkpoint bytes. Never panics.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() {
        return Err(CheckpointError::Truncated {
            expected: MAGIC.len(),
            found: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(16))
        .ok_or_else(|| header_err("header length overflows"))?;
    if bytes.len() < header_end {
        return Err(CheckpointError::Truncated {
            expected: header_end,
            found: bytes.len(),
        });
    }
    let raw: serde_json::Value = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| header_err(e.to_string()))?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => return Err(CheckpointError::UnsupportedVersion(u32::try_from(v).unwrap_or(u32::MAX))),
        None => return Err(header_err("missing format_version")),
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| header_err(e.to_string()))?;

    let mut expected_offset = 0usize;
    for e in &header.manifest {
        let manifest_err = |msg: &str| CheckpointError::Manifest {
            name: e.name.clone(),
            msg: msg.to_string(),
        };
        if e.shape.is_empty() || e.shape.contains(&0) {
            return Err(manifest_err("empty or zero-extent shape"));
        }
        let n = e
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| manifest_err("shape overflows"))?;
        if e.offset != expected_offset as u64 {
            return Err(manifest_err("offset out of sequence"));
        }
        expected_offset = expected_offset.checked_add(n).ok_or_else(|| manifest_err("payload overflows"))?;
    }
    let payload = &bytes[header_end..];
    if payload.len() < expected_offset {
        return Err(CheckpointError::Truncated {
            expected: header_end + expected_offset,
            found: bytes.len(),
        });
    }
    if payload.len() > expected_offset {
        return Err(header_err(format!("{} trailing bytes", payload.len() - expected_offset)));
    }
    let mut tensors = Vec::with_capacity(header.manifest.len());
    for e in &header.manifest {
        let start = e.offset as usize;
        let n: usize = e.shape.iter().product();
        let chunk = &payload[start..start + 8 * n];
        if fnv1a64(chunk) != e.checksum {
            return Err(CheckpointError::Checksum(e.name.clone()));
        }
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(e.shape.clone(), data).map_err(|err| header_err(err.to_string()))?);
    }
    Ok(Checkpoint { header, tensors })
}

impl Checkpoint {
    pub fn config(&self) -> Result<ModelConfig> {
        let cfg: ModelConfig = serde_json::from_value(self.header.config.clone())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rebuilds the model recorded in the checkpoint.
    pub fn into_model(self) -> Result<Model> {
        let cfg = self.config()?;
        self.restore(&cfg)
    }

    /// Rebuilds the model, requiring the stored config to equal `expected`.
    pub fn into_model_checked(self, expected: &ModelConfig) -> Result<Model> {
        let cfg = self.config()?;
        let diff = expected.diff_fields(&cfg);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff));
        }
        self.restore(&cfg)
    }

    fn restore(self, cfg: &ModelConfig) -> Result<Model> {
        let mut model = Model::build(cfg, self.header.seed)?;
        if model.store.len() != self.header.manifest.len() {
            return Err(CheckpointError::Manifest {
                name: "*".into(),
                msg: format!("{} entries, model has {} parameters", self.header.manifest.len(), model.store.len()),
            }
            .into());
        }
        for (p, (e, t)) in model.store.iter_mut().zip(self.header.manifest.into_iter().zip(self.tensors)) {
            if p.name != e.name || p.tensor.shape() != e.shape.as_slice() {
                return Err(CheckpointError::Manifest {
                    name: e.name,
                    msg: format!("model expects `{}` with shape {:?}", p.name, p.tensor.shape()),
                }
                .into());
            }
            p.tensor = t;
            p.trainable = e.trainable;
        }
        Ok(model)
    }
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    decode(&std::fs::read(path)?)?.into_model()
}

/// Loads and checks the stored config against `expected`.
pub fn load_checked(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model> {
    decode(&std::fs::read(path)?)?.into_model_checked(expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Variant;

    fn model() -> Model {
        let mut cfg = ModelConfig::desk(Variant::VimF);
        cfg.image_size = 32;
        cfg.depth = 2;
        Model::build(&cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let back = decode(&encode(&m)).unwrap().into_model().unwrap();
        assert_eq!(back.store, m.store);
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut b = encode(&model());
        let last = b.len() - 3;
        b[last] ^= 1;
        assert!(matches!(decode(&b), Err(CheckpointError::Checksum(_))));
    }

    #[test]
    fn truncation_detected() {
        let b = encode(&model());
        assert!(matches!(decode(&b[..b.len() - 8]), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(decode(&b[..4]), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn bad_magic() {
        let mut b = encode(&model());
        b[0] = b'X';
        assert_eq!(decode(&b), Err(CheckpointError::BadMagic));
    }

    #[test]
    fn config_mismatch_lists_fields() {
        let m = model();
        let mut other = m.cfg.clone();
        other.depth = 3;
        let err = decode(&encode(&m)).unwrap().into_model_checked(&other).unwrap_err();
        match err {
            Error::ConfigMismatch(f) => assert_eq!(f, vec!["depth".to_string()]),
            e => panic!("unexpected {e}"),
        }
    }
}
