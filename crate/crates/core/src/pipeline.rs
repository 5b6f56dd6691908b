//! Indexing pipeline (corpus → embeddings → index) and query pipeline
//! (query → top-k retrieval → optional rerank).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::biencoder::{Embedder, TextRole};
use crate::corpus::Dataset;
use crate::crossencoder::{rank_scored, Reranker};
use crate::error::{Error, Result};
use crate::index::VectorIndex;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SearchMode {
    #[default]
    Exact,
    Ann { n_probe: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_k_retrieve")]
    pub k_retrieve: usize,
    /// Defaults to `k_retrieve`.
    #[serde(default)]
    pub k_rerank: Option<usize>,
    #[serde(default = "default_final_k")]
    pub final_k: usize,
    #[serde(default)]
    pub search: SearchMode,
    #[serde(default = "default_batch")]
    pub embed_batch_size: usize,
}

fn default_k_retrieve() -> usize {
    100
}
fn default_final_k() -> usize {
    10
}
fn default_batch() -> usize {
    64
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_retrieve: default_k_retrieve(),
            k_rerank: None,
            final_k: default_final_k(),
            search: SearchMode::Exact,
            embed_batch_size: default_batch(),
        }
    }
}

impl PipelineConfig {
    pub fn k_rerank(&self) -> usize {
        self.k_rerank.unwrap_or(self.k_retrieve)
    }

    pub fn validate(&self) -> Result<()> {
        let k_rerank = self.k_rerank();
        if self.final_k == 0 || self.final_k > k_rerank || k_rerank > self.k_retrieve {
            return Err(Error::Config(format!(
                "need 1 <= final_k ({}) <= k_rerank ({k_rerank}) <= k_retrieve ({})",
                self.final_k, self.k_retrieve
            )));
        }
        if self.embed_batch_size == 0 {
            return Err(Error::Config("embed_batch_size must be >= 1".into()));
        }
        if let SearchMode::Ann { n_probe: 0 } = self.search {
            return Err(Error::Config("n_probe must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexingStats {
    pub n_passages: usize,
    pub seconds: f64,
    pub passages_per_sec: f64,
}

/// Embeds every passage in batches and builds an index tagged with the embedder fingerprint.
pub fn run_indexing(dataset: &Dataset, embedder: &dyn Embedder, batch_size: usize) -> Result<(VectorIndex, IndexingStats)> {
    let start = Instant::now();
    let texts: Vec<String> = dataset.passages.iter().map(|p| p.full_text()).collect();
    let mut vectors = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(batch_size.max(1)) {
        let refs: Vec<&str> = chunk.iter().map(String::as_str).collect();
        let embedded = embedder.embed_texts(&refs, TextRole::Passage).map_err(|e| Error::Backend {
            completed: vectors.len(),
            message: e.to_string(),
        })?;
        vectors.extend(embedded);
    }
    let ids = dataset.passages.iter().map(|p| p.id.clone()).collect();
    let index = VectorIndex::build(ids, vectors)?.with_fingerprint(embedder.fingerprint());
    let seconds = start.elapsed().as_secs_f64().max(1e-9);
    let n = index.len();
    Ok((index, IndexingStats { n_passages: n, seconds, passages_per_sec: n as f64 / seconds }))
}

/// Passage id → text lookup used for reranking.
pub struct PassageTexts(HashMap<String, String>);

impl PassageTexts {
    pub fn new(dataset: &Dataset) -> Self {
        Self(dataset.passages.iter().map(|p| (p.id.clone(), p.full_text())).collect())
    }

    pub fn get(&self, id: &str) -> Result<&str> {
        self.0
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidInput(format!("passage `{id}` has no text")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub embed_ms: f64,
    pub retrieve_ms: f64,
    pub rerank_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub query_id: String,
    pub ranked: Vec<String>,
    pub scores: Vec<f64>,
    pub timings: StageTimings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub label: String,
    pub dataset: String,
    pub config: PipelineConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalRun {
    pub header: RunHeader,
    pub entries: Vec<RunEntry>,
}

impl RetrievalRun {
    /// One header line followed by one line per query.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, file: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let parse_err = |line: usize, e: serde_json::Error| Error::Parse { file: file.into(), line: line + 1, message: e.to_string() };
        let (i, first) = lines.next().ok_or_else(|| Error::Format(format!("{file}: empty run file")))?;
        let header = serde_json::from_str(first).map_err(|e| parse_err(i, e))?;
        let entries = lines.map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(i, e))).collect::<Result<_>>()?;
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, &path.display().to_string())
    }
}

/// A query pipeline: one embedder over one index, optionally followed by a reranker.
pub struct QueryPipeline<'a> {
    pub index: &'a VectorIndex,
    pub embedder: &'a dyn Embedder,
    pub reranker: Option<&'a dyn Reranker>,
    pub texts: &'a PassageTexts,
    pub config: PipelineConfig,
}

impl<'a> QueryPipeline<'a> {
    pub fn new(
        index: &'a VectorIndex,
        embedder: &'a dyn Embedder,
        reranker: Option<&'a dyn Reranker>,
        texts: &'a PassageTexts,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        if index.fingerprint() != embedder.fingerprint() {
            return Err(Error::FingerprintMismatch {
                index: index.fingerprint().to_string(),
                embedder: embedder.fingerprint(),
            });
        }
        Ok(Self { index, embedder, reranker, texts, config })
    }

    /// Returns at most `final_k` (id, score) pairs; scores are logits when reranked.
    pub fn run_query(&self, query: &str) -> Result<(Vec<(String, f64)>, StageTimings)> {
        let mut timings = StageTimings::default();
        let t = Instant::now();
        let qv = self
            .embedder
            .embed_texts(&[query], TextRole::Query)?
            .pop()
            .ok_or_else(|| Error::InvalidInput("embedder returned no vector".into()))?;
        timings.embed_ms = t.elapsed().as_secs_f64() * 1e3;
        let t = Instant::now();
        let hits = match self.config.search {
            SearchMode::Exact => self.index.search_exact(&qv, self.config.k_retrieve)?,
            SearchMode::Ann { n_probe } => self.index.search_ann(&qv, self.config.k_retrieve, n_probe)?,
        };
        timings.retrieve_ms = t.elapsed().as_secs_f64() * 1e3;
        let Some(reranker) = self.reranker else {
            let out = hits.into_iter().take(self.config.final_k).map(|h| (h.passage_id, h.score as f64)).collect();
            return Ok((out, timings));
        };
        let t = Instant::now();
        let candidates: Vec<String> = hits.into_iter().take(self.config.k_rerank()).map(|h| h.passage_id).collect();
        let texts: Vec<&str> = candidates.iter().map(|id| self.texts.get(id)).collect::<Result<_>>()?;
        let logits = reranker.score_batch(query, &texts)?;
        if logits.len() != candidates.len() {
            return Err(Error::InvalidInput(format!("reranker returned {} scores for {} passages", logits.len(), candidates.len())));
        }
        let ranked = rank_scored(candidates.into_iter().zip(logits).collect(), self.config.final_k);
        timings.rerank_ms = t.elapsed().as_secs_f64() * 1e3;
        Ok((ranked.into_iter().map(|s| (s.passage_id, s.logit)).collect(), timings))
    }

    pub fn run_dataset(&self, dataset: &Dataset, label: &str) -> Result<RetrievalRun> {
        let entries = dataset
            .queries
            .iter()
            .map(|q| {
                let (ranked, timings) = self.run_query(&q.text)?;
                let (ranked, scores) = ranked.into_iter().unzip();
                Ok(RunEntry { query_id: q.id.clone(), ranked, scores, timings })
            })
            .collect::<Result<_>>()?;
        Ok(RetrievalRun {
            header: RunHeader { label: label.to_string(), dataset: dataset.name.clone(), config: self.config.clone() },
            entries,
        })
    }
}

pub struct BenchmarkRow {
    pub label: String,
    pub run: Result<RetrievalRun>,
}

pub struct BenchmarkOutcome {
    pub rows: Vec<BenchmarkRow>,
    pub indexing_passes: usize,
    pub indexing: Vec<(String, IndexingStats)>,
}

/// Runs every embedder alone and combined with every reranker, in table order:
/// each embedder's baseline row, then one `+ reranker` row per reranker.
/// Each embedder indexes the corpus once; failures are recorded per row.
pub fn run_benchmark(
    dataset: &Dataset,
    embedders: &[(&str, &dyn Embedder)],
    rerankers: &[(&str, &dyn Reranker)],
    config: &PipelineConfig,
) -> BenchmarkOutcome {
    let texts = PassageTexts::new(dataset);
    let mut outcome = BenchmarkOutcome { rows: Vec::new(), indexing_passes: 0, indexing: Vec::new() };
    for &(emb_label, embedder) in embedders {
        outcome.indexing_passes += 1;
        let index = match run_indexing(dataset, embedder, config.embed_batch_size) {
            Ok((index, stats)) => {
                outcome.indexing.push((emb_label.to_string(), stats));
                Some(index)
            }
            Err(e) => {
                log::error!("indexing with {emb_label} failed: {e}");
                outcome.rows.push(BenchmarkRow { label: emb_label.to_string(), run: Err(e) });
                None
            }
        };
        let Some(index) = index else { continue };
        let stages = std::iter::once((emb_label.to_string(), None))
            .chain(rerankers.iter().map(|&(r, rr)| (format!("{emb_label} + {r}"), Some(rr))));
        for (label, reranker) in stages {
            let run = QueryPipeline::new(&index, embedder, reranker, &texts, config.clone())
                .and_then(|p| p.run_dataset(dataset, &label));
            if let Err(e) = &run {
                log::error!("pipeline {label} failed: {e}");
            }
            outcome.rows.push(BenchmarkRow { label, run });
        }
    }
    outcome
}
