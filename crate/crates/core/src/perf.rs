//! Latency and throughput profiling for deployment trade-offs.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biencoder::{Embedder, TextRole};
use crate::crossencoder::Reranker;
use crate::error::{Error, Result};

pub const QUERY_TOKENS: usize = 20;
pub const PASSAGE_TOKENS: usize = 512;
pub const INDEX_BATCH: usize = 64;
pub const RERANK_CANDIDATES: usize = 40;
pub const DEFAULT_WARMUP: usize = 3;
pub const MIN_MEASURED: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub scenario: String,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Items per second.
    pub throughput: f64,
    pub batch_size: usize,
    pub token_len: usize,
    pub warmup: usize,
    pub measured: usize,
    #[serde(default)]
    pub hardware: String,
    /// Per-iteration wall times in milliseconds, warmup excluded.
    pub samples_ms: Vec<f64>,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

impl PerfReport {
    /// Summarizes measured samples; `items_per_sample` converts latency into throughput.
    pub fn from_samples(
        scenario: impl Into<String>,
        samples_ms: Vec<f64>,
        items_per_sample: usize,
        batch_size: usize,
        token_len: usize,
        warmup: usize,
    ) -> Result<Self> {
        if samples_ms.is_empty() || samples_ms.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidInput("perf samples must be finite and non-empty".into()));
        }
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let total_ms: f64 = samples_ms.iter().sum();
        let mean_ms = total_ms / samples_ms.len() as f64;
        let items = (items_per_sample * samples_ms.len()) as f64;
        Ok(Self {
            scenario: scenario.into(),
            mean_ms,
            p50_ms: percentile(&sorted, 0.5),
            p95_ms: percentile(&sorted, 0.95),
            throughput: items / (total_ms.max(1e-6) / 1e3),
            batch_size,
            token_len,
            warmup,
            measured: samples_ms.len(),
            hardware: hardware_note(),
            samples_ms,
        })
    }

    pub fn std_error_ms(&self) -> f64 {
        let n = self.samples_ms.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let var = self.samples_ms.iter().map(|s| (s - self.mean_ms).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    }

    pub fn min_ms(&self) -> f64 {
        self.samples_ms.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_ms(&self) -> f64 {
        self.samples_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn hardware_note() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{} {}, {threads} hardware threads", std::env::consts::OS, std::env::consts::ARCH)
}

/// Text of exactly `n_words` words drawn from `words`.
pub fn synthetic_text(words: &[String], n_words: usize, rng: &mut ChaCha8Rng) -> String {
    (0..n_words)
        .map(|_| words.choose(rng).map(String::as_str).unwrap_or("x"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn check_iters(n_iters: usize, warmup: usize) -> Result<()> {
    if n_iters < warmup + MIN_MEASURED {
        return Err(Error::Config(format!(
            "need at least {MIN_MEASURED} measured iterations after {warmup} warmup (got n_iters = {n_iters})"
        )));
    }
    Ok(())
}

fn time_ms<F: FnMut() -> Result<()>>(mut f: F) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Single 20-word queries, one per call. `n_iters` includes the warmup calls.
pub fn profile_query_embedding(embedder: &dyn Embedder, words: &[String], n_iters: usize, seed: u64) -> Result<PerfReport> {
    check_iters(n_iters, DEFAULT_WARMUP)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_iters);
    for i in 0..n_iters {
        let q = synthetic_text(words, QUERY_TOKENS, &mut rng);
        let ms = time_ms(|| embedder.embed_texts(&[q.as_str()], TextRole::Query).map(drop))?;
        if i >= DEFAULT_WARMUP {
            samples.push(ms);
        }
    }
    PerfReport::from_samples("query_embedding", samples, 1, 1, QUERY_TOKENS, DEFAULT_WARMUP)
}

/// Embeds `n_passages` 512-word passages in batches of 64 after one warmup batch.
pub fn profile_indexing(embedder: &dyn Embedder, words: &[String], n_passages: usize, seed: u64) -> Result<PerfReport> {
    profile_indexing_with(embedder, words, n_passages, PASSAGE_TOKENS, seed)
}

pub fn profile_indexing_with(
    embedder: &dyn Embedder,
    words: &[String],
    n_passages: usize,
    token_len: usize,
    seed: u64,
) -> Result<PerfReport> {
    if n_passages < INDEX_BATCH * MIN_MEASURED {
        return Err(Error::Config(format!("indexing profile needs >= {} passages", INDEX_BATCH * MIN_MEASURED)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = || (0..INDEX_BATCH).map(|_| synthetic_text(words, token_len, &mut rng)).collect::<Vec<_>>();
    let warm = batch();
    embedder.embed_texts(&warm.iter().map(String::as_str).collect::<Vec<_>>(), TextRole::Passage)?;
    let mut samples = Vec::new();
    let mut done = 0;
    while done < n_passages {
        let mut texts = batch();
        texts.truncate(n_passages - done);
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        samples.push(time_ms(|| embedder.embed_texts(&refs, TextRole::Passage).map(drop))?);
        done += refs.len();
    }
    let mut report = PerfReport::from_samples("indexing", samples, INDEX_BATCH, INDEX_BATCH, token_len, 1)?;
    report.throughput = n_passages as f64 / (report.samples_ms.iter().sum::<f64>().max(1e-6) / 1e3);
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankShape {
    pub n_candidates: usize,
    pub query_tokens: usize,
    pub passage_tokens: usize,
}

impl Default for RerankShape {
    fn default() -> Self {
        Self { n_candidates: RERANK_CANDIDATES, query_tokens: QUERY_TOKENS, passage_tokens: 64 }
    }
}

/// Total latency of scoring one query against `n_candidates` passages.
pub fn profile_rerank(reranker: &dyn Reranker, words: &[String], shape: RerankShape, n_iters: usize, seed: u64) -> Result<PerfReport> {
    check_iters(n_iters, DEFAULT_WARMUP)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_iters);
    for i in 0..n_iters {
        let q = synthetic_text(words, shape.query_tokens, &mut rng);
        let ps: Vec<String> = (0..shape.n_candidates).map(|_| synthetic_text(words, shape.passage_tokens, &mut rng)).collect();
        let refs: Vec<&str> = ps.iter().map(String::as_str).collect();
        let ms = time_ms(|| reranker.score_batch(&q, &refs).map(drop))?;
        if i >= DEFAULT_WARMUP {
            samples.push(ms);
        }
    }
    let mut report = PerfReport::from_samples("rerank", samples, 1, shape.n_candidates, shape.passage_tokens, DEFAULT_WARMUP)?;
    report.scenario = format!("rerank@{}", shape.n_candidates);
    Ok(report)
}

/// Measurements for one deployment option.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineProfile {
    pub label: String,
    pub query_embedding: PerfReport,
    pub indexing: PerfReport,
    #[serde(default)]
    pub rerank: Option<PerfReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineComparison {
    pub one_stage: String,
    pub two_stage: String,
    /// One-stage indexing time divided by two-stage indexing time for the same corpus.
    pub indexing_time_ratio: f64,
    /// Two-stage query latency (embedding + rerank) minus one-stage query latency.
    pub added_query_latency_ms: f64,
    pub one_stage_query_ms: f64,
    pub two_stage_query_ms: f64,
    pub summary: String,
}

/// Contrasts a large single-stage embedder with a small embedder plus reranker.
pub fn compare_pipelines(one_stage: &PipelineProfile, two_stage: &PipelineProfile) -> Result<PipelineComparison> {
    let (a, b) = (&one_stage.indexing, &two_stage.indexing);
    if a.batch_size != b.batch_size || a.token_len != b.token_len {
        return Err(Error::InvalidInput(format!(
            "indexing scenarios differ: batch {} x {} tokens vs batch {} x {} tokens",
            a.batch_size, a.token_len, b.batch_size, b.token_len
        )));
    }
    let (qa, qb) = (&one_stage.query_embedding, &two_stage.query_embedding);
    if qa.batch_size != qb.batch_size || qa.token_len != qb.token_len {
        return Err(Error::InvalidInput("query embedding scenarios differ".into()));
    }
    if !(a.throughput > 0.0 && b.throughput > 0.0) {
        return Err(Error::InvalidInput("indexing throughput must be positive".into()));
    }
    let rerank_ms = two_stage.rerank.as_ref().map_or(0.0, |r| r.mean_ms);
    let one_q = qa.mean_ms + one_stage.rerank.as_ref().map_or(0.0, |r| r.mean_ms);
    let two_q = qb.mean_ms + rerank_ms;
    let ratio = b.throughput / a.throughput;
    let added = two_q - one_q;
    let mut summary = String::new();
    let _ = writeln!(summary, "indexing: {} {:.1} passages/s, {} {:.1} passages/s", one_stage.label, a.throughput, two_stage.label, b.throughput);
    let _ = writeln!(summary, "indexing time ratio: {ratio:.2}x ({} indexes the same corpus {ratio:.2}x faster)", two_stage.label);
    let _ = writeln!(summary, "query latency: {} {one_q:.2} ms, {} {two_q:.2} ms ({added:+.2} ms)", one_stage.label, two_stage.label);
    Ok(PipelineComparison {
        one_stage: one_stage.label.clone(),
        two_stage: two_stage.label.clone(),
        indexing_time_ratio: ratio,
        added_query_latency_ms: added,
        one_stage_query_ms: one_q,
        two_stage_query_ms: two_q,
        summary,
    })
}
