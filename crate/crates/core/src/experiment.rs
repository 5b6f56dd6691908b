//! Desk-scale experiments on synthetic data: train a retriever, mine hard
//! negatives, train rerankers, and score both stages on a held-out dataset.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::biencoder::{train_biencoder, BiencoderTrainConfig, LocalEmbedder};
use crate::corpus::{make_synthetic_dataset_with, synthetic_word_list, Dataset, SyntheticConfig};
use crate::crossencoder::LocalReranker;
use crate::error::Result;
use crate::eval::{evaluate_run, DEFAULT_K};
use crate::index::VectorIndex;
use crate::losses::{ListExample, LossKind};
use crate::mining::{mine_negatives, MiningConfig, MiningStats};
use crate::pipeline::{run_indexing, PassageTexts, PipelineConfig, QueryPipeline};
use crate::tokenizer::Vocab;
use crate::train::{build_list_examples, train_reranker, RerankerTrainConfig, TrainLog};
use crate::xformer::{AttentionMode, ModelConfig, Pooling};

/// Backbone hyperparameters without the vocabulary-dependent fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub attention_mode: AttentionMode,
}

impl BackboneSpec {
    pub fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            attention_mode: self.attention_mode,
            pooling: Pooling::Mean,
            seed,
        }
    }

    /// Twice the layers and twice the width.
    pub fn doubled(&self) -> Self {
        Self { d_model: 2 * self.d_model, d_ff: 2 * self.d_ff, n_layers: 2 * self.n_layers, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_words: usize,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    pub train_queries: usize,
    pub train_passages: usize,
    pub test_queries: usize,
    pub test_passages: usize,
    pub vocab_max_size: usize,
    pub embedder: BackboneSpec,
    pub embedder_training: BiencoderTrainConfig,
    #[serde(default)]
    pub mining: MiningConfig,
    pub reranker: BackboneSpec,
    pub reranker_training: RerankerTrainConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl BackboneSpec {
    /// Retriever backbone used by the synthetic experiments.
    pub fn embedder_default() -> Self {
        Self { d_model: 32, n_heads: 2, n_layers: 1, d_ff: 64, max_seq_len: 16, attention_mode: AttentionMode::Bidirectional }
    }

    /// Reranker backbone used by the synthetic experiments; sequences hold a query and a passage.
    pub fn reranker_default() -> Self {
        Self { d_model: 32, n_heads: 2, n_layers: 1, d_ff: 64, max_seq_len: 24, attention_mode: AttentionMode::Bidirectional }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_words: 270,
            synthetic: SyntheticConfig::default(),
            train_queries: 16000,
            train_passages: 16000,
            test_queries: 100,
            test_passages: 500,
            vocab_max_size: 1000,
            embedder: BackboneSpec::embedder_default(),
            embedder_training: BiencoderTrainConfig::default(),
            mining: MiningConfig::default(),
            reranker: BackboneSpec::reranker_default(),
            reranker_training: RerankerTrainConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Everything shared by the rerankers trained for one seed.
pub struct Prepared {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub vocab: Vocab,
    pub embedder: LocalEmbedder<f64>,
    pub embedder_log: TrainLog,
    pub mining_stats: MiningStats,
    pub lists: Vec<ListExample>,
    pub test_index: VectorIndex,
    pub retriever_ndcg: f64,
}

/// Train and test datasets share the word list but are generated from different seeds.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let words = synthetic_word_list(cfg.n_words);
    let train = make_synthetic_dataset_with(1000 + seed, cfg.train_queries, cfg.train_passages, &words, &cfg.synthetic)?;
    let test = make_synthetic_dataset_with(2000 + seed, cfg.test_queries, cfg.test_passages, &words, &cfg.synthetic)?;
    let vocab = Vocab::build(words.iter().map(String::as_str), cfg.vocab_max_size)?;
    let btc = BiencoderTrainConfig { seed, ..cfg.embedder_training.clone() };
    let (model, embedder_log) = train_biencoder::<f64>(&train, None, &vocab, cfg.embedder.model_config(vocab.size(), seed), &btc)?;
    let embedder = LocalEmbedder::new(model, vocab.clone());
    let (train_index, _) = run_indexing(&train, &embedder, cfg.pipeline.embed_batch_size)?;
    let mining = MiningConfig { seed, ..cfg.mining.clone() };
    let (mined, mining_stats) = mine_negatives(&embedder, &train_index, &train, &mining)?;
    let rtc = &cfg.reranker_training;
    let lists = build_list_examples(&train, &mined, rtc.n_negatives, rtc.random_negatives, seed)?;
    let (test_index, _) = run_indexing(&test, &embedder, cfg.pipeline.embed_batch_size)?;
    let texts = PassageTexts::new(&test);
    let run = QueryPipeline::new(&test_index, &embedder, None, &texts, cfg.pipeline.clone())?.run_dataset(&test, "retriever")?;
    let retriever_ndcg = evaluate_run(&run, &test.qrels, DEFAULT_K)?.mean;
    Ok(Prepared { seed, train, test, vocab, embedder, embedder_log, mining_stats, lists, test_index, retriever_ndcg })
}

/// Trains one reranker on the prepared lists and returns its held-out NDCG@10.
pub fn reranked_ndcg(
    prepared: &Prepared,
    backbone: &BackboneSpec,
    training: &RerankerTrainConfig,
    pipeline: &PipelineConfig,
) -> Result<(f64, TrainLog)> {
    let seed = prepared.seed;
    let tc = RerankerTrainConfig { seed, ..training.clone() };
    let (model, log) = train_reranker::<f64>(&prepared.lists, &prepared.vocab, backbone.model_config(prepared.vocab.size(), seed), &tc)?;
    let reranker = LocalReranker::new(model, prepared.vocab.clone());
    let texts = PassageTexts::new(&prepared.test);
    let run = QueryPipeline::new(&prepared.test_index, &prepared.embedder, Some(&reranker), &texts, pipeline.clone())?
        .run_dataset(&prepared.test, "reranked")?;
    Ok((evaluate_run(&run, &prepared.test.qrels, DEFAULT_K)?.mean, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndToEnd {
    pub seed: u64,
    pub retriever_ndcg: f64,
    pub reranked_ndcg: f64,
}

pub fn run_end_to_end(cfg: &ExperimentConfig, seed: u64) -> Result<EndToEnd> {
    let prepared = prepare(cfg, seed)?;
    let (reranked, _) = reranked_ndcg(&prepared, &cfg.reranker, &cfg.reranker_training, &cfg.pipeline)?;
    Ok(EndToEnd { seed, retriever_ndcg: prepared.retriever_ndcg, reranked_ndcg: reranked })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeSpec {
    pub label: String,
    pub backbone: BackboneSpec,
}

/// Cross product of backbone sizes, attention directions and losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub sizes: Vec<SizeSpec>,
    pub attention: Vec<AttentionMode>,
    pub losses: Vec<LossKind>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    /// Base size and its doubled counterpart, both directions, both losses.
    pub fn full(base: &BackboneSpec, seeds: Vec<u64>) -> Self {
        Self {
            sizes: vec![
                SizeSpec { label: "small".into(), backbone: base.clone() },
                SizeSpec { label: "large".into(), backbone: base.doubled() },
            ],
            attention: vec![AttentionMode::Bidirectional, AttentionMode::Causal],
            losses: vec![LossKind::InfoNce, LossKind::Bce],
            seeds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub size: String,
    pub attention: AttentionMode,
    pub loss: LossKind,
    /// Held-out NDCG@10 per seed, in grid seed order.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub retriever_per_seed: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Every configuration sees the same lists, step budget and batch size per seed.
pub fn run_ablation(cfg: &ExperimentConfig, grid: &AblationGrid) -> Result<AblationReport> {
    let mut cells: Vec<(String, AttentionMode, LossKind, BackboneSpec)> = Vec::new();
    for size in &grid.sizes {
        for &attention in &grid.attention {
            for &loss in &grid.losses {
                cells.push((size.label.clone(), attention, loss, BackboneSpec { attention_mode: attention, ..size.backbone.clone() }));
            }
        }
    }
    let mut scores = vec![Vec::with_capacity(grid.seeds.len()); cells.len()];
    let mut retriever_per_seed = Vec::new();
    for &seed in &grid.seeds {
        let prepared = prepare(cfg, seed)?;
        retriever_per_seed.push(prepared.retriever_ndcg);
        for (cell, out) in cells.iter().zip(scores.iter_mut()) {
            let training = RerankerTrainConfig { loss: cell.2, ..cfg.reranker_training.clone() };
            let (ndcg, _) = reranked_ndcg(&prepared, &cell.3, &training, &cfg.pipeline)?;
            log::info!("seed {seed} {} {:?} {:?}: {ndcg:.4}", cell.0, cell.1, cell.2);
            out.push(ndcg);
        }
    }
    let rows = cells
        .into_iter()
        .zip(scores)
        .map(|((size, attention, loss, _), per_seed)| AblationRow { size, attention, loss, mean: mean(&per_seed), per_seed })
        .collect();
    Ok(AblationReport { seeds: grid.seeds.clone(), retriever_per_seed, rows })
}

impl AblationReport {
    /// Mean over rows matching `filter`, averaged seed-wise.
    pub fn marginal(&self, filter: impl Fn(&AblationRow) -> bool) -> Vec<f64> {
        let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| filter(r)).collect();
        (0..self.seeds.len()).map(|s| mean(&rows.iter().map(|r| r.per_seed[s]).collect::<Vec<_>>())).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(|s| format!("seed {s}")).collect();
        let _ = writeln!(out, "{:<8} {:<14} {:<8} {:>7}  {}", "size", "attention", "loss", "mean", seeds.join("  "));
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:>6.4}")).collect::<Vec<_>>().join("  ");
        let _ = writeln!(out, "{:<8} {:<14} {:<8} {:>7.4}  {}", "-", "retriever", "-", mean(&self.retriever_per_seed), fmt(&self.retriever_per_seed));
        for r in &self.rows {
            let attention = match r.attention {
                AttentionMode::Causal => "causal",
                AttentionMode::Bidirectional => "bidirectional",
            };
            let loss = match r.loss {
                LossKind::Bce => "bce",
                LossKind::InfoNce => "infonce",
            };
            let _ = writeln!(out, "{:<8} {:<14} {:<8} {:>7.4}  {}", r.size, attention, loss, r.mean, fmt(&r.per_seed));
        }
        out
    }
}
