//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "EAGLEPC1"
//! version u16      format version (currently 1)
//! m_len   u32      manifest byte length
//! manifest         UTF-8 JSON (arch, hashes, step, metric snapshot)
//! blocks           repeated until EOF:
//!   name_len u16, name UTF-8, rank u8, dims u32 x rank, payload f32 LE
//! ```
//!
//! Parameters are stored as 32-bit floats; in-memory math stays 64-bit. The
//! manifest carries a SHA-256 of the block bytes, so corruption or shape
//! drift is caught before any tensor reaches the model.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use crate::util::sha256_hex;

use crate::graph::ParamMap;
use crate::model::{ArchConfig, LmError, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EAGLEPC1";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic {got:?}, expected {MAGIC:?}")]
    BadMagic { got: Vec<u8> },
    #[error("unsupported format version {got}, expected {FORMAT_VERSION}")]
    BadVersion { got: u16 },
    #[error("manifest is not valid JSON: {0}")]
    ManifestJson(#[from] serde_json::Error),
    #[error("payload hash mismatch: manifest says {expected}, file hashes to {got}")]
    HashMismatch { expected: String, got: String },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error(transparent)]
    Model(#[from] LmError),
    #[error("malformed tensor block: {0}")]
    BadBlock(String),
}

/// Everything needed to interpret and trust the payload.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub arch: ArchConfig,
    pub config_hash: String,
    pub corpus_hash: String,
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<serde_json::Value>,
    /// SHA-256 (hex) of the tensor block bytes; filled in at save time.
    #[serde(default)]
    pub payload_sha256: String,
}

impl Manifest {
    pub fn new(arch: ArchConfig, config_hash: String, corpus_hash: String, step: u64) -> Self {
        Manifest {
            arch,
            config_hash,
            corpus_hash,
            step,
            metrics: None,
            payload_sha256: String::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub manifest: Manifest,
}

/// Round every parameter through `f32`, the storage precision. A checkpoint
/// loads back bitwise-equal to the quantized form of what was saved.
pub fn quantize_to_f32(params: &ModelParams) -> ModelParams {
    let tensors: ParamMap = params
        .tensors()
        .iter()
        .map(|(n, t)| {
            let data: Vec<f64> = t.data().iter().map(|&x| x as f32 as f64).collect();
            (n.clone(), Tensor::new(t.dims().to_vec(), data).unwrap())
        })
        .collect();
    ModelParams::from_tensors(params.arch().clone(), tensors).expect("shape-preserving map")
}

fn tensor_blocks(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in params.tensors() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

/// Serialize a checkpoint to bytes.
pub fn to_bytes(params: &ModelParams, manifest: &Manifest) -> Result<Vec<u8>, CheckpointError> {
    let blocks = tensor_blocks(params);
    let mut manifest = manifest.clone();
    manifest.arch = params.arch().clone();
    manifest.payload_sha256 = sha256_hex(&blocks);
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(blocks.len() + manifest_json.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&blocks);
    Ok(out)
}

pub fn save(path: &Path, params: &ModelParams, manifest: &Manifest) -> Result<(), CheckpointError> {
    let bytes = to_bytes(params, manifest)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

fn read_exact_or(
    reader: &mut impl Read,
    buf: &mut [u8],
    what: &str,
) -> Result<(), CheckpointError> {
    reader
        .read_exact(buf)
        .map_err(|_| CheckpointError::Truncated(what.to_string()))
}

/// Parse a checkpoint from bytes, verifying magic, version, payload hash and
/// tensor shapes against the manifest architecture.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut reader = bytes;
    let mut magic = [0u8; 8];
    read_exact_or(&mut reader, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            got: magic.to_vec(),
        });
    }
    let mut version = [0u8; 2];
    read_exact_or(&mut reader, &mut version, "version")?;
    let version = u16::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion { got: version });
    }
    let mut len = [0u8; 4];
    read_exact_or(&mut reader, &mut len, "manifest length")?;
    let m_len = u32::from_le_bytes(len) as usize;
    if reader.len() < m_len {
        return Err(CheckpointError::Truncated("manifest".into()));
    }
    let (manifest_bytes, blocks) = reader.split_at(m_len);
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)?;

    let got_hash = sha256_hex(blocks);
    if got_hash != manifest.payload_sha256 {
        return Err(CheckpointError::HashMismatch {
            expected: manifest.payload_sha256.clone(),
            got: got_hash,
        });
    }

    let mut tensors = ParamMap::new();
    let mut reader = blocks;
    while !reader.is_empty() {
        let mut len = [0u8; 2];
        read_exact_or(&mut reader, &mut len, "tensor name length")?;
        let name_len = u16::from_le_bytes(len) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(&mut reader, &mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|e| CheckpointError::BadBlock(format!("tensor name not UTF-8: {e}")))?;
        let mut rank = [0u8; 1];
        read_exact_or(&mut reader, &mut rank, "tensor rank")?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 4];
            read_exact_or(&mut reader, &mut d, "tensor dims")?;
            dims.push(u32::from_le_bytes(d) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut x = [0u8; 4];
            read_exact_or(&mut reader, &mut x, "tensor payload")?;
            data.push(f32::from_le_bytes(x) as f64);
        }
        let tensor = Tensor::new(dims, data)
            .map_err(|e| CheckpointError::BadBlock(format!("tensor `{name}`: {e}")))?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(CheckpointError::BadBlock(format!("duplicate tensor `{name}`")));
        }
    }
    let params = ModelParams::from_tensors(manifest.arch.clone(), tensors)?;
    Ok(Checkpoint { params, manifest })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (ModelParams, Manifest) {
        let arch = ArchConfig {
            charset: "ab ?".into(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_len: 16,
            ..ArchConfig::default()
        };
        let params = ModelParams::init(arch.clone(), 9).unwrap();
        let manifest = Manifest::new(arch, "cfg-hash".into(), "corpus-hash".into(), 7);
        (params, manifest)
    }

    #[test]
    fn round_trip_is_bitwise_after_quantization() {
        let (params, manifest) = fixture();
        let bytes = to_bytes(&params, &manifest).unwrap();
        let loaded = from_bytes(&bytes).unwrap();
        let quantized = quantize_to_f32(&params);
        for (name, t) in quantized.tensors() {
            let lt = &loaded.params.tensors()[name];
            for (a, b) in t.data().iter().zip(lt.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
        // A second trip is the exact identity, bytes included.
        let bytes2 = to_bytes(&loaded.params, &loaded.manifest).unwrap();
        let loaded2 = from_bytes(&bytes2).unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(loaded.params, loaded2.params);
        assert_eq!(loaded.manifest.step, 7);
        assert_eq!(loaded.manifest.config_hash, "cfg-hash");
    }

    #[test]
    fn magic_and_version_are_enforced() {
        let (params, manifest) = fixture();
        let mut bytes = to_bytes(&params, &manifest).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::BadMagic { .. })
        ));
        let mut bytes = to_bytes(&params, &manifest).unwrap();
        bytes[8] = 99;
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::BadVersion { got: 99 })
        ));
    }

    #[test]
    fn truncation_yields_no_partial_model() {
        let (params, manifest) = fixture();
        let bytes = to_bytes(&params, &manifest).unwrap();
        for cut in [5, 9, 13, bytes.len() / 2, bytes.len() - 3] {
            let err = from_bytes(&bytes[..cut]);
            assert!(err.is_err(), "cut at {cut} should fail");
        }
    }

    #[test]
    fn payload_corruption_names_both_hashes() {
        let (params, manifest) = fixture();
        let mut bytes = to_bytes(&params, &manifest).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        match from_bytes(&bytes) {
            Err(CheckpointError::HashMismatch { expected, got }) => {
                assert_ne!(expected, got);
                assert_eq!(expected.len(), 64);
                assert_eq!(got.len(), 64);
            }
            other => panic!("expected hash mismatch, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_against_arch_is_rejected() {
        let (params, mut manifest) = fixture();
        // Lie about the architecture: d_model 16 cannot host d=8 tensors.
        manifest.arch.d_model = 16;
        let blocks = tensor_blocks(&params);
        manifest.payload_sha256 = sha256_hex(&blocks);
        let manifest_json = serde_json::to_vec(&manifest).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&manifest_json);
        bytes.extend_from_slice(&blocks);
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::Model(_))
        ));
    }
}
