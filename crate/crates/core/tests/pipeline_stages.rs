//! Two-stage query pipeline and benchmark behavior, using test doubles.

mod common;

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use stagerank_core::biencoder::{Embedder, TextRole};
use stagerank_core::crossencoder::Reranker;
use stagerank_core::pipeline::{run_benchmark, run_indexing, PassageTexts, PipelineConfig, QueryPipeline};
use stagerank_core::scalar::dot;
use stagerank_core::{Error, Result};

/// Hashed bag of words, normalized. Optionally fails after a number of calls.
struct HashEmbedder {
    dim: usize,
    calls: AtomicUsize,
    fail_after: Option<usize>,
}

impl HashEmbedder {
    fn new(dim: usize) -> Self {
        Self { dim, calls: AtomicUsize::new(0), fail_after: None }
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for w in text.split_whitespace() {
            let h = w.bytes().fold(1469598103934665603u64, |h, b| (h ^ b as u64).wrapping_mul(1099511628211));
            v[(h % self.dim as u64) as usize] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        v.into_iter().map(|x| x / n).collect()
    }
}

impl Embedder for HashEmbedder {
    fn embed_texts(&self, texts: &[&str], _role: TextRole) -> Result<Vec<Vec<f32>>> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_after.is_some_and(|f| n >= f) {
            return Err(Error::InvalidInput("backend down".into()));
        }
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn fingerprint(&self) -> String {
        format!("hash-{}", self.dim)
    }
}

/// Scores with the embedder's own inner product, counting every scored passage.
struct CopyScores<'a> {
    embedder: &'a HashEmbedder,
    scored: AtomicUsize,
}

impl Reranker for CopyScores<'_> {
    fn score_batch(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>> {
        self.scored.fetch_add(passages.len(), Ordering::SeqCst);
        let q = self.embedder.embed(query);
        Ok(passages.iter().map(|p| dot(&q, &self.embedder.embed(p)) as f64).collect())
    }
    fn fingerprint(&self) -> String {
        "copy".into()
    }
}

/// Reverses whatever it is given so reranking visibly changes the order.
struct Reverse;

impl Reranker for Reverse {
    fn score_batch(&self, _query: &str, passages: &[&str]) -> Result<Vec<f64>> {
        Ok((0..passages.len()).map(|i| i as f64).collect())
    }
    fn fingerprint(&self) -> String {
        "reverse".into()
    }
}

#[test]
fn reranker_sees_exactly_k_rerank_candidates() {
    let data = common::dataset(31, 20, 300);
    let emb = HashEmbedder::new(32);
    let (index, _) = run_indexing(&data, &emb, 64).unwrap();
    let texts = PassageTexts::new(&data);
    let rr = CopyScores { embedder: &emb, scored: AtomicUsize::new(0) };
    let cfg = PipelineConfig { k_retrieve: 100, k_rerank: Some(40), final_k: 10, ..Default::default() };
    let pipe = QueryPipeline::new(&index, &emb, Some(&rr), &texts, cfg).unwrap();
    for q in &data.queries {
        let before = rr.scored.load(Ordering::SeqCst);
        let (ranked, _) = pipe.run_query(&q.text).unwrap();
        assert_eq!(rr.scored.load(Ordering::SeqCst) - before, 40);
        assert_eq!(ranked.len(), 10);
        let retrieved: HashSet<String> =
            index.search_exact(&emb.embed(&q.text), 40).unwrap().into_iter().map(|h| h.passage_id).collect();
        assert!(ranked.iter().all(|(id, _)| retrieved.contains(id)));
    }
}

#[test]
fn copying_the_first_stage_scores_reproduces_one_stage_output() {
    let data = common::dataset(32, 30, 400);
    let emb = HashEmbedder::new(32);
    let (index, _) = run_indexing(&data, &emb, 64).unwrap();
    let texts = PassageTexts::new(&data);
    let rr = CopyScores { embedder: &emb, scored: AtomicUsize::new(0) };
    let cfg = PipelineConfig::default();
    let one = QueryPipeline::new(&index, &emb, None, &texts, cfg.clone()).unwrap();
    let two = QueryPipeline::new(&index, &emb, Some(&rr), &texts, cfg).unwrap();
    for q in &data.queries {
        let (a, _) = one.run_query(&q.text).unwrap();
        let (b, _) = two.run_query(&q.text).unwrap();
        assert_eq!(a, b);
        let exact: Vec<String> =
            index.search_exact(&emb.embed(&q.text), 10).unwrap().into_iter().map(|h| h.passage_id).collect();
        assert_eq!(a.iter().map(|p| p.0.clone()).collect::<Vec<_>>(), exact);
    }
}

#[test]
fn reranking_reorders_within_the_retrieved_set() {
    let data = common::dataset(33, 10, 200);
    let emb = HashEmbedder::new(32);
    let (index, _) = run_indexing(&data, &emb, 64).unwrap();
    let texts = PassageTexts::new(&data);
    let cfg = PipelineConfig { k_retrieve: 20, final_k: 20, ..Default::default() };
    let one = QueryPipeline::new(&index, &emb, None, &texts, cfg.clone()).unwrap();
    let two = QueryPipeline::new(&index, &emb, Some(&Reverse), &texts, cfg).unwrap();
    for q in &data.queries {
        let mut a: Vec<String> = one.run_query(&q.text).unwrap().0.into_iter().map(|p| p.0).collect();
        let b: Vec<String> = two.run_query(&q.text).unwrap().0.into_iter().map(|p| p.0).collect();
        a.reverse();
        assert_eq!(a, b);
    }
}

#[test]
fn benchmark_indexes_once_per_embedder() {
    let data = common::dataset(34, 15, 150);
    let emb = HashEmbedder::new(16);
    let copy = CopyScores { embedder: &emb, scored: AtomicUsize::new(0) };
    let rerankers: [(&str, &dyn Reranker); 3] = [("a", &copy), ("b", &Reverse), ("c", &Reverse)];
    let out = run_benchmark(&data, &[("hash", &emb)], &rerankers, &PipelineConfig::default());
    assert_eq!(out.indexing_passes, 1);
    let labels: Vec<&str> = out.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["hash", "hash + a", "hash + b", "hash + c"]);
    // One indexing pass plus one call per query per row.
    assert_eq!(emb.calls.load(Ordering::SeqCst), data.passages.len().div_ceil(64) + 4 * data.queries.len());
    let runs: Vec<_> = out.rows.into_iter().map(|r| r.run.unwrap()).collect();
    for (a, b) in runs[0].entries.iter().zip(&runs[1].entries) {
        assert_eq!(a.ranked, b.ranked);
    }
}

#[test]
fn failing_embedder_reports_progress() {
    let data = common::dataset(35, 5, 300);
    let emb = HashEmbedder { fail_after: Some(2), ..HashEmbedder::new(16) };
    match run_indexing(&data, &emb, 64) {
        Err(Error::Backend { completed, .. }) => assert_eq!(completed, 128),
        other => panic!("expected a backend error, got {:?}", other.map(|_| ())),
    }
    let out = run_benchmark(&data, &[("hash", &emb)], &[("r", &Reverse)], &PipelineConfig::default());
    assert_eq!(out.rows.len(), 1);
    assert!(out.rows[0].run.is_err());
}

#[test]
fn mismatched_index_is_rejected() {
    let data = common::dataset(36, 5, 100);
    let (index, _) = run_indexing(&data, &HashEmbedder::new(16), 64).unwrap();
    let other = HashEmbedder::new(8);
    let texts = PassageTexts::new(&data);
    assert!(matches!(
        QueryPipeline::new(&index, &other, None, &texts, PipelineConfig::default()),
        Err(Error::FingerprintMismatch { .. })
    ));
}

#[test]
fn indexing_is_reproducible() {
    let data = common::dataset(37, 5, 250);
    let emb = HashEmbedder::new(16);
    let (a, _) = run_indexing(&data, &emb, 64).unwrap();
    let (b, _) = run_indexing(&data, &emb, 7).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn empty_corpus_or_queries() {
    let mut data = common::dataset(38, 5, 50);
    data.queries.clear();
    let emb = HashEmbedder::new(16);
    let (index, _) = run_indexing(&data, &emb, 64).unwrap();
    let texts = PassageTexts::new(&data);
    let run = QueryPipeline::new(&index, &emb, Some(&Reverse), &texts, PipelineConfig::default())
        .unwrap()
        .run_dataset(&data, "x")
        .unwrap();
    assert!(run.entries.is_empty());
}
