//! Shared fixtures for the benchmarks under `benches/`.

use ade::corpus::Pair;
use ade::encoder::EncoderConfig;
use ade::synthetic::topic_corpus;
use ade::{Dataset, Model, ModelConfig, TokenSequence, TrainConfig, Variant};

/// A small topic corpus encoded at `max_len` 16.
pub fn dataset(n: usize) -> Dataset {
    Dataset::from_dialogues(topic_corpus(n, 20, 0.3, 0), 1, 16).expect("synthetic corpus is valid")
}

pub fn encoder_config(model_dim: usize) -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        model_dim,
        heads: 4,
        word_dim: 32,
        ffn_dim: 4 * model_dim,
        max_len: 16,
        alpha: 0.5,
        dropout: 0.0,
    }
}

pub fn model(variant: Variant, model_dim: usize, vocab_size: usize) -> Model {
    Model::new(ModelConfig::new(encoder_config(model_dim), variant), vocab_size, 0).expect("valid config")
}

pub fn train_config(variant: Variant, batch_size: usize) -> TrainConfig {
    let enc = encoder_config(32);
    TrainConfig {
        variant,
        batch_size,
        validation_fraction: 0.0,
        layers: enc.layers,
        model_dim: enc.model_dim,
        heads: enc.heads,
        word_dim: enc.word_dim,
        ffn_dim: enc.ffn_dim,
        max_len: enc.max_len,
        dropout: 0.1,
        ..TrainConfig::default()
    }
}

pub fn first(pairs: &[Pair], n: usize) -> (Vec<TokenSequence>, Vec<TokenSequence>) {
    let p = &pairs[..n.min(pairs.len())];
    (p.iter().map(|p| p.context.clone()).collect(), p.iter().map(|p| p.response.clone()).collect())
}
