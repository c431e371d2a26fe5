#![allow(dead_code)]

use vla_core::data::Episode;
use vla_core::model::{Model, ModelConfig};
use vla_core::sim::{generate_demonstrations, SimConfig, TaskFamily};
use vla_core::teacher::{annotate_in_memory, RuleBasedTeacher};
use vla_core::tokenizer::{assemble_sample, build_vocabulary, corpus_words, TokenizedSample, Vocabulary};
use vla_core::Scalar;

pub const GRID: usize = 6;

pub fn episodes(n: usize, seed: u64) -> Vec<Episode> {
    let sim = SimConfig {
        grid_size: GRID,
        views: 1,
        max_steps: 30,
    };
    let eps = generate_demonstrations(n, &[TaskFamily::MoveNear, TaskFamily::Pick], seed, &sim).unwrap();
    annotate_in_memory(&RuleBasedTeacher, &eps).unwrap()
}

pub fn vocab(eps: &[Episode]) -> Vocabulary {
    build_vocabulary(16, &corpus_words(eps)).unwrap()
}

pub fn micro_cfg(v: &Vocabulary) -> ModelConfig {
    ModelConfig {
        vocab_size: v.size(),
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 256,
        grid_size: GRID,
        seed: 7,
        ..ModelConfig::default()
    }
}

pub fn micro_model<T: Scalar>(v: &Vocabulary) -> Model<T> {
    Model::new(micro_cfg(v)).unwrap()
}

pub fn samples(eps: &[Episode], v: &Vocabulary, budget: usize) -> Vec<TokenizedSample> {
    eps.iter()
        .flat_map(|e| e.steps.iter())
        .map(|s| assemble_sample(s, v, budget).unwrap())
        .collect()
}
