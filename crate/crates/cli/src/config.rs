//! The run configuration file: every section optional, unknown keys rejected.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use stagerank_core::biencoder::BiencoderTrainConfig;
use stagerank_core::corpus::SyntheticConfig;
use stagerank_core::experiment::{AblationGrid, BackboneSpec, ExperimentConfig, SizeSpec};
use stagerank_core::losses::LossKind;
use stagerank_core::mining::MiningConfig;
use stagerank_core::pipeline::PipelineConfig;
use stagerank_core::train::RerankerTrainConfig;
use stagerank_core::xformer::AttentionMode;
use stagerank_serve::{RemoteEmbedderConfig, ServeConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub mining: MiningConfig,
    pub pipeline: PipelineSection,
    pub eval: EvalSection,
    pub perf: PerfSection,
    pub serve: ServeConfig,
    pub ablation: AblationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub seed: u64,
    pub n_queries: usize,
    pub n_passages: usize,
    pub n_words: usize,
    pub generator: SyntheticConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { seed: 7, n_queries: 100, n_passages: 500, n_words: 270, generator: SyntheticConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub max_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { max_size: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub reranker: BackboneSpec,
    pub embedder: BackboneSpec,
    /// Keep only the bottom `prune_k` reranker layers when starting from an existing checkpoint.
    pub prune_k: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { reranker: BackboneSpec::reranker_default(), embedder: BackboneSpec::embedder_default(), prune_k: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub reranker: RerankerTrainConfig,
    pub embedder: BiencoderTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub retrieval: PipelineConfig,
    /// Used instead of a local embedder checkpoint when set.
    pub remote_embedder: Option<RemoteEmbedderConfig>,
    /// Builds clustered lists at indexing time for approximate search.
    pub ann_lists: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { k: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerfSection {
    pub n_iters: usize,
    pub n_passages: usize,
    pub passage_tokens: usize,
    pub n_candidates: usize,
    pub rerank_passage_tokens: usize,
}

impl Default for PerfSection {
    fn default() -> Self {
        Self { n_iters: 23, n_passages: 640, passage_tokens: 512, n_candidates: 40, rerank_passage_tokens: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub train_queries: usize,
    pub train_passages: usize,
    pub sizes: Vec<SizeSpec>,
    pub attention: Vec<AttentionMode>,
    pub losses: Vec<LossKind>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        let small = BackboneSpec { d_model: 16, d_ff: 32, ..BackboneSpec::reranker_default() };
        let grid = AblationGrid::full(&small, vec![1, 2, 3]);
        Self {
            train_queries: 16000,
            train_passages: 16000,
            sizes: grid.sizes,
            attention: grid.attention,
            losses: grid.losses,
            seeds: grid.seeds,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `--seed` overrides every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.training.reranker.seed = seed;
        self.training.embedder.seed = seed;
        self.mining.seed = seed;
        self.ablation.seeds = vec![seed];
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.retrieval.validate()?;
        self.mining.validate()?;
        if let Some(remote) = &self.pipeline.remote_embedder {
            remote.validate()?;
        }
        if self.eval.k == 0 {
            anyhow::bail!("eval.k must be >= 1");
        }
        if self.perf.n_iters < stagerank_core::perf::DEFAULT_WARMUP + stagerank_core::perf::MIN_MEASURED {
            anyhow::bail!("perf.n_iters must leave at least 10 measured iterations after 3 warmup");
        }
        Ok(())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            n_words: self.dataset.n_words,
            synthetic: self.dataset.generator.clone(),
            train_queries: self.ablation.train_queries,
            train_passages: self.ablation.train_passages,
            test_queries: self.dataset.n_queries,
            test_passages: self.dataset.n_passages,
            vocab_max_size: self.tokenizer.max_size,
            embedder: self.model.embedder.clone(),
            embedder_training: self.training.embedder.clone(),
            mining: self.mining.clone(),
            reranker: self.model.reranker.clone(),
            reranker_training: self.training.reranker.clone(),
            pipeline: self.pipeline.retrieval.clone(),
        }
    }

    pub fn grid(&self) -> AblationGrid {
        AblationGrid {
            sizes: self.ablation.sizes.clone(),
            attention: self.ablation.attention.clone(),
            losses: self.ablation.losses.clone(),
            seeds: self.ablation.seeds.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"datset": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"training": {"reranker": {"los": "bce"}}}"#).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed(11);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.training.reranker.seed, 11);
    }
}
