//! Binary checkpoint: `VLACKPT1`, u32 LE header length, JSON header, then
//! every tensor's little-endian values in visiting order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tokenizer::Vocabulary;
use crate::Scalar;

use super::{Model, ModelConfig, ModelError};

const MAGIC: &[u8; 8] = b"VLACKPT1";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    scalar: String,
    config: ModelConfig,
    frozen_prefix: usize,
    vocab_hash: String,
    vocab: String,
    tensors: Vec<TensorMeta>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl<T: Scalar> Model<T> {
    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<(), ModelError> {
        let tensors = self.params.tensors();
        let header = Header {
            scalar: T::NAME.to_string(),
            config: self.cfg,
            frozen_prefix: self.frozen_prefix(),
            vocab_hash: vocab.hash(),
            vocab: vocab.to_json(),
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorMeta {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.num_parameters() * std::mem::size_of::<T>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &tensors {
            let vals: Vec<T> = t.iter().copied().collect();
            out.extend_from_slice(&T::to_le_bytes_vec(&vals));
        }
        fs::write(path, out).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Loads a checkpoint and the vocabulary embedded in it.
    pub fn load(path: &Path) -> Result<(Self, Vocabulary), ModelError> {
        let bytes = fs::read(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.scalar != T::NAME {
            return Err(bad(format!("stored as {}, requested {}", header.scalar, T::NAME)));
        }
        let vocab = Vocabulary::from_json(&header.vocab).map_err(|e| bad(e.to_string()))?;
        if vocab.hash() != header.vocab_hash {
            return Err(ModelError::VocabMismatch {
                checkpoint: header.vocab_hash,
                given: vocab.hash(),
            });
        }
        let mut model = Model::<T>::new(header.config)?;
        model.freeze_lower_layers(header.frozen_prefix)?;
        let mut offset = 12 + hlen;
        let width = std::mem::size_of::<T>();
        let metas = header.tensors;
        let mut tensors = model.params.tensors_mut();
        if metas.len() != tensors.len() {
            return Err(bad("tensor count differs from config"));
        }
        for (meta, (name, t)) in metas.iter().zip(tensors.iter_mut()) {
            if meta.name != *name || meta.shape != t.shape() {
                return Err(bad(format!("tensor `{}` does not match `{name}`", meta.name)));
            }
            let n = t.len() * width;
            let chunk = bytes.get(offset..offset + n).ok_or_else(|| bad("truncated tensor data"))?;
            for (dst, v) in t.iter_mut().zip(T::from_le_bytes_slice(chunk)) {
                *dst = v;
            }
            offset += n;
        }
        drop(tensors);
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok((model, vocab))
    }

    /// Loads and checks that the embedded vocabulary hashes to `expected`'s.
    pub fn load_checked(path: &Path, expected: &Vocabulary) -> Result<Self, ModelError> {
        let (model, vocab) = Self::load(path)?;
        if vocab.hash() != expected.hash() {
            return Err(ModelError::VocabMismatch {
                checkpoint: vocab.hash(),
                given: expected.hash(),
            });
        }
        Ok(model)
    }
}
