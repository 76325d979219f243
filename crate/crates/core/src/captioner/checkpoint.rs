//! Checkpoint container.
//!
//! A single JSON document:
//!
//! ```json
//! {
//!   "format": "capfeed-checkpoint",
//!   "version": 1,
//!   "config": { ...CaptionerConfig... },
//!   "vocab": ["<pad>", "<start>", "<end>", "<unk>", ...],
//!   "step": 500,
//!   "tensors": [{"name": "conv0_w", "shape": [27, 8], "data": "<base64 of little-endian f64>"}, ...],
//!   "content_hash": "<sha256 hex>"
//! }
//! ```
//!
//! The content hash is SHA-256 over the format tag, the canonical config JSON,
//! the vocabulary and every tensor's name, shape and raw bytes, in that order.
//! The step counter and optimizer state are not part of the hash.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CaptionerConfig, Captioner, Params};
use crate::dataset::Vocabulary;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "capfeed-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorBlob {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: CaptionerConfig,
    vocab: Vocabulary,
    step: u64,
    tensors: Vec<TensorBlob>,
    content_hash: String,
}

fn le_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(super) fn content_hash(config: &CaptionerConfig, vocab: &Vocabulary, params: &Params) -> String {
    let mut h = Sha256::new();
    h.update(CHECKPOINT_FORMAT.as_bytes());
    h.update(VERSION.to_le_bytes());
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for t in vocab.tokens() {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    for ((name, data), (_, shape)) in params.tensors().into_iter().zip(params.shapes()) {
        h.update(name.as_bytes());
        for d in shape {
            h.update((d as u64).to_le_bytes());
        }
        h.update(le_bytes(data));
    }
    hex::encode(h.finalize())
}

fn to_file(model: &Captioner) -> CheckpointFile {
    let engine = base64::engine::general_purpose::STANDARD;
    let tensors = model
        .params
        .tensors()
        .into_iter()
        .zip(model.params.shapes())
        .map(|((name, data), (_, shape))| TensorBlob {
            name: name.to_owned(),
            shape,
            data: engine.encode(le_bytes(data)),
        })
        .collect();
    CheckpointFile {
        format: CHECKPOINT_FORMAT.to_owned(),
        version: VERSION,
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        step: model.step,
        tensors,
        content_hash: model.content_hash(),
    }
}

pub(super) fn save(model: &Captioner, path: &Path) -> Result<()> {
    let json = serde_json::to_vec(&to_file(model)).map_err(|e| Error::json("checkpoint", e))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(super) fn load(path: &Path) -> Result<Captioner> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_json(&text)
}

/// Decode and verify a checkpoint document.
pub fn checkpoint_from_json(bytes: &[u8]) -> Result<Captioner> {
    let file: CheckpointFile = serde_json::from_slice(bytes).map_err(|e| Error::json("checkpoint", e))?;
    if file.format != CHECKPOINT_FORMAT || file.version != VERSION {
        return Err(Error::Integrity(format!("unsupported format {} v{}", file.format, file.version)));
    }
    file.config.validate()?;
    // Fresh model supplies the expected tensor layout.
    let mut model = Captioner::new(file.config, file.vocab)?;
    let expected = model.params.shapes();
    if file.tensors.len() != expected.len() {
        return Err(Error::Integrity(format!("{} tensors, expected {}", file.tensors.len(), expected.len())));
    }
    let engine = base64::engine::general_purpose::STANDARD;
    for ((blob, (name, shape)), (_, dst)) in file.tensors.iter().zip(expected).zip(model.params.tensors_mut()) {
        if blob.name != name || blob.shape != shape {
            return Err(Error::Integrity(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                blob.name, blob.shape
            )));
        }
        let raw = engine
            .decode(&blob.data)
            .map_err(|e| Error::Integrity(format!("tensor {name}: {e}")))?;
        if raw.len() != dst.len() * 8 {
            return Err(Error::Integrity(format!("tensor {name}: {} bytes for {} values", raw.len(), dst.len())));
        }
        for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    model.step = file.step;
    let hash = model.content_hash();
    if hash != file.content_hash {
        return Err(Error::Integrity(format!("content hash {hash} != recorded {}", file.content_hash)));
    }
    Ok(model)
}

/// Serialize to the JSON container in memory.
pub(super) fn to_json(model: &Captioner) -> Vec<u8> {
    serde_json::to_vec(&to_file(model)).expect("checkpoint serializes")
}

impl Captioner {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        to_json(self)
    }
}
