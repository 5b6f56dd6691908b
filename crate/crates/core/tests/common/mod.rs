#![allow(dead_code)]

use stagerank_core::biencoder::{train_biencoder, BiencoderTrainConfig, LocalEmbedder};
use stagerank_core::corpus::{make_synthetic_dataset, synthetic_word_list, Dataset};
use stagerank_core::experiment::BackboneSpec;
use stagerank_core::tokenizer::Vocab;
use stagerank_core::train::TrainLog;

pub fn words() -> Vec<String> {
    synthetic_word_list(270)
}

pub fn vocab() -> Vocab {
    Vocab::build(words().iter().map(String::as_str), 1000).unwrap()
}

pub fn dataset(seed: u64, n_queries: usize, n_passages: usize) -> Dataset {
    make_synthetic_dataset(seed, n_queries, n_passages, &words()).unwrap()
}

pub fn small_backbone() -> BackboneSpec {
    BackboneSpec { d_model: 16, d_ff: 32, ..BackboneSpec::embedder_default() }
}

/// A quickly trained toy retriever.
pub fn embedder(train: &Dataset, steps: usize, seed: u64) -> (LocalEmbedder<f64>, TrainLog) {
    let vocab = vocab();
    let cfg = BiencoderTrainConfig { d_embed: 16, steps, batch_size: 16, seed, ..Default::default() };
    let (model, log) = train_biencoder::<f64>(train, None, &vocab, small_backbone().model_config(vocab.size(), seed), &cfg).unwrap();
    (LocalEmbedder::new(model, vocab), log)
}
