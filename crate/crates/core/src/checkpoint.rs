//! "SVCK" model checkpoints.
//!
//! Layout (little-endian): magic `SVCK`, version u32, metadata JSON length u64
//! and bytes, tensor count u32, then per tensor name length u32, UTF-8 name,
//! rank u32, dims as u64, f32 data. A SHA-256 digest of everything before it
//! closes the file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::ByteReader;
use crate::config::PipelineConfig;
use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::head::{HeadConfig, HeadInput, HeadWeights};
use crate::tensor::NamedTensors;

const MAGIC: &[u8; 4] = b"SVCK";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: PipelineConfig,
    /// Head configuration with data-dependent dims filled in.
    pub head: HeadConfig,
    /// Class index to speaker label.
    pub speakers: Vec<String>,
    pub truncate_layer: usize,
    pub layer_indexing: String,
    /// Completed training epochs.
    pub epoch: usize,
}

/// A complete model: metadata, optional frozen encoder and the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub meta: CheckpointMeta,
    pub encoder: Option<EncoderWeights>,
    pub head: HeadWeights,
}

impl Model {
    pub fn new(
        config: PipelineConfig,
        head_cfg: HeadConfig,
        speakers: Vec<String>,
        encoder: Option<EncoderWeights>,
        head: HeadWeights,
    ) -> Self {
        let truncate_layer = config.encoder.truncate_layer;
        Self {
            meta: CheckpointMeta {
                config,
                head: head_cfg,
                speakers,
                truncate_layer,
                layer_indexing: "1-based".into(),
                epoch: 0,
            },
            encoder,
            head,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = NamedTensors::default();
        if let Some(enc) = &self.encoder {
            enc.to_named("encoder", &mut tensors);
        }
        self.head.to_named("head", &mut tensors);
        encode(&self.meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = decode(bytes)?;
        let encoder = match meta.head.input {
            HeadInput::Encoder => Some(EncoderWeights::from_named(&meta.config.encoder, "encoder", &tensors)?),
            HeadInput::Mfb => None,
        };
        let head = HeadWeights::from_named(&meta.head, "head", &tensors)?;
        if meta.speakers.len() != meta.head.n_classes {
            return Err(Error::Checkpoint(format!(
                "{} speaker labels for {} classes",
                meta.speakers.len(),
                meta.head.n_classes
            )));
        }
        Ok(Self { meta, encoder, head })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn encode(meta: &CheckpointMeta, tensors: &NamedTensors) -> Vec<u8> {
    let json = serde_json::to_string(meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors.0 {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Reads only the metadata block (after verifying the checksum).
pub fn read_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?.0)
}

fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, NamedTensors)> {
    let ck = |e: Error| match e {
        Error::Archive(m) => Error::Checkpoint(m),
        other => other,
    };
    if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected SVCK".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = ByteReader { bytes: body, pos: 4 };
    let version = r.u32().map_err(ck)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let json_len = r.u64().map_err(ck)? as usize;
    let json = std::str::from_utf8(r.take(json_len).map_err(ck)?)
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let meta: CheckpointMeta =
        serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let count = r.u32().map_err(ck)?;
    let mut tensors = NamedTensors::default();
    for _ in 0..count {
        let len = r.u32().map_err(ck)? as usize;
        let name = std::str::from_utf8(r.take(len).map_err(ck)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32().map_err(ck)? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()
            .map_err(ck)?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?);
        let data = raw
            .map_err(ck)?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if tensors.0.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        tensors.insert(&name, shape, data);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok((meta, tensors))
}
