//! Decoder-only multimodal transformer with hand-written backprop.
//!
//! IMG positions take a projected patch feature (color one-hot, row one-hot,
//! column one-hot) instead of a token embedding. Blocks are pre-norm with
//! causal multi-head attention and a GELU feed-forward.

mod checkpoint;
mod decode;
mod forward;
mod optim;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::Scalar;

pub use decode::{argmax, generate, Decoder};
pub use forward::{AttentionRecord, ForwardCache};
pub use optim::{Adam, AdamConfig};
pub use params::{Block, Params};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("freeze depth {k} outside 0..={n_layers}")]
    FreezeOutOfRange { k: usize, n_layers: usize },
    #[error("sample has {got} image positions, model expects {expected}")]
    ImageCount { expected: usize, got: usize },
    #[error("image of size {got} does not match model grid size {expected}")]
    ImageSize { expected: usize, got: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, given {given}")]
    VocabMismatch { checkpoint: String, given: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Side length P of each view; a view contributes P*P image positions.
    pub grid_size: usize,
    pub views: usize,
    pub num_colors: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 544,
            grid_size: 16,
            views: 1,
            num_colors: crate::sim::NUM_COLORS,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn patch_count(&self) -> usize {
        self.views * self.grid_size * self.grid_size
    }

    /// Width of the one-hot patch feature.
    pub fn patch_features(&self) -> usize {
        self.num_colors + 2 * self.grid_size
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return err("vocab_size, d_model, n_heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.grid_size == 0 || self.views == 0 || self.num_colors == 0 {
            return err("grid_size, views and num_colors must be positive".into());
        }
        if self.max_seq_len <= self.patch_count() {
            return err(format!(
                "max_seq_len {} leaves no room after {} image positions",
                self.max_seq_len,
                self.patch_count()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: Params<T>,
    frozen_prefix: usize,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> ndarray::Array2<T> {
    ndarray::Array2::from_shape_simple_fn(shape, || T::from_f64_lossy(rng.random_range(-bound..bound)))
}

impl<T: Scalar> Model<T> {
    /// Projections are U(-1/sqrt(fan_in), 1/sqrt(fan_in)), with the two
    /// projections writing into the residual stream further scaled by
    /// 1/sqrt(2 * n_layers). Embeddings are U(-1, 1), biases zero, norm gains
    /// one. A frozen, never-trained prefix then perturbs the embeddings
    /// instead of drowning them. Values are drawn in f64 so the f32 and f64
    /// models for one seed agree up to rounding.
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        use ndarray::{Array1, Array2};
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let resid = 1.0 / ((2 * cfg.n_layers.max(1)) as f64).sqrt();
        let tok_emb = uniform(&mut rng, (cfg.vocab_size, d), 1.0);
        let pos_emb = uniform(&mut rng, (cfg.max_seq_len, d), 1.0);
        let patch_w = uniform(&mut rng, (cfg.patch_features(), d), 1.0);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(Block {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                w_qkv: uniform(&mut rng, (d, 3 * d), fan(d)),
                b_qkv: Array1::zeros(3 * d),
                w_o: uniform(&mut rng, (d, d), fan(d) * resid),
                b_o: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_ff1: uniform(&mut rng, (d, cfg.d_ff), fan(d)),
                b_ff1: Array1::zeros(cfg.d_ff),
                w_ff2: uniform(&mut rng, (cfg.d_ff, d), fan(cfg.d_ff) * resid),
                b_ff2: Array1::zeros(d),
            });
        }
        let head_w: Array2<T> = uniform(&mut rng, (d, cfg.vocab_size), fan(d));
        let params = Params {
            tok_emb,
            pos_emb,
            patch_w,
            patch_b: Array1::zeros(d),
            blocks,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            head_w,
            head_b: Array1::zeros(cfg.vocab_size),
        };
        Ok(Model {
            cfg,
            params,
            frozen_prefix: 0,
        })
    }

    pub fn frozen_prefix(&self) -> usize {
        self.frozen_prefix
    }

    /// Excludes blocks `[0, k)` and, for `k > 0`, the token, position and
    /// patch embeddings from training. The final norm and head stay trainable.
    pub fn freeze_lower_layers(&mut self, k: usize) -> Result<(), ModelError> {
        if k > self.cfg.n_layers {
            return Err(ModelError::FreezeOutOfRange {
                k,
                n_layers: self.cfg.n_layers,
            });
        }
        self.frozen_prefix = k;
        Ok(())
    }

    /// Whether the named tensor is in the trainable set.
    pub fn is_trainable(&self, name: &str) -> bool {
        params::is_trainable(name, self.frozen_prefix)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over every tensor's little-endian bytes, in visiting order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.tensors() {
            h.update(name.as_bytes());
            let vals: Vec<T> = t.iter().copied().collect();
            h.update(T::to_le_bytes_vec(&vals));
        }
        hex::encode(h.finalize())
    }

    /// Per-tensor checksums, for locating which parameters moved.
    pub fn tensor_checksums(&self) -> Vec<(String, String)> {
        self.params
            .tensors()
            .into_iter()
            .map(|(name, t)| {
                let vals: Vec<T> = t.iter().copied().collect();
                (name, hex::encode(Sha256::digest(T::to_le_bytes_vec(&vals))))
            })
            .collect()
    }

    /// Fresh zero gradients shaped like the parameters.
    pub fn zero_grads(&self) -> Params<T> {
        self.params.zeros_like()
    }

    /// Copy with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg,
            params: self.params.map(|v| U::from_f64_lossy(v.to_f64_lossy())),
            frozen_prefix: self.frozen_prefix,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 64,
            grid_size: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::<f32>::new(cfg()).unwrap();
        let b = Model::<f32>::new(cfg()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = Model::<f32>::new(ModelConfig { seed: 1, ..cfg() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn head_size_and_divisibility() {
        let c = ModelConfig {
            vocab_size: 10,
            ..ModelConfig::default()
        };
        assert_eq!(c.d_head(), 16);
        let bad = ModelConfig { d_model: 10, n_heads: 4, ..c };
        assert!(matches!(Model::<f32>::new(bad), Err(ModelError::Config(_))));
    }

    #[test]
    fn freeze_bounds() {
        let mut m = Model::<f32>::new(cfg()).unwrap();
        assert!(m.freeze_lower_layers(3).is_err());
        m.freeze_lower_layers(0).unwrap();
        assert!(m.params.tensors().iter().all(|(n, _)| m.is_trainable(n)));
        m.freeze_lower_layers(2).unwrap();
        let trainable: Vec<String> = m
            .params
            .tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| m.is_trainable(n))
            .collect();
        assert_eq!(trainable, vec!["ln_f.g", "ln_f.b", "head.w", "head.b"]);
    }
}
