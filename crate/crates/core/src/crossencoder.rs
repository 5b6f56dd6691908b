//! The reranker: `[BOS] query [SEP] passage` → backbone → mean pool → linear head.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, sigmoid, Scalar};
use crate::tokenizer::{encode_pair, TokenSeq, Vocab};
use crate::xformer::{Backbone, ForwardTrace, ModelConfig, ParameterSet};

/// Cross-encoder producing a raw relevance logit per (query, passage) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RerankerModel<T> {
    pub backbone: Backbone<T>,
    pub head_weight: Vec<T>,
    pub head_bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankerGrads<T> {
    pub backbone: ParameterSet<T>,
    pub head_weight: Vec<T>,
    pub head_bias: T,
}

impl<T: Scalar> RerankerGrads<T> {
    pub fn zeros_like(model: &RerankerModel<T>) -> Self {
        Self {
            backbone: ParameterSet::zeros(&model.backbone.config),
            head_weight: vec![T::zero(); model.head_weight.len()],
            head_bias: T::zero(),
        }
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = self.backbone.named_tensors().into_iter().map(|t| t.2).collect();
        out.push(&self.head_weight);
        out.push(std::slice::from_ref(&self.head_bias));
        out
    }

    pub fn fill_zero(&mut self) {
        self.backbone.fill_zero();
        self.head_weight.iter_mut().for_each(|x| *x = T::zero());
        self.head_bias = T::zero();
    }
}

/// A passage with its logit and 1-based rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPassage {
    pub passage_id: String,
    pub logit: f64,
    pub rank: usize,
}

impl<T: Scalar> RerankerModel<T> {
    /// Fresh backbone from `config` with a zero head.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let backbone = Backbone::new(config)?;
        let d = backbone.config.d_model;
        Ok(Self { backbone, head_weight: vec![T::zero(); d], head_bias: T::zero() })
    }

    pub fn from_parts(backbone: Backbone<T>, head_weight: Vec<T>, head_bias: T) -> Result<Self> {
        if head_weight.len() != backbone.config.d_model {
            return Err(Error::Shape(format!(
                "head weight has length {}, expected d_model {}",
                head_weight.len(),
                backbone.config.d_model
            )));
        }
        let model = Self { backbone, head_weight, head_bias };
        if !model.is_finite() {
            return Err(Error::Format("reranker parameters contain non-finite values".into()));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    pub fn is_finite(&self) -> bool {
        self.backbone.params.is_finite()
            && self.head_weight.iter().all(|x| x.is_finite())
            && self.head_bias.is_finite()
    }

    pub fn encode(&self, vocab: &Vocab, query: &str, passage: &str) -> TokenSeq {
        encode_pair(vocab, query, passage, self.backbone.config.max_seq_len)
    }

    pub fn score_tokens(&self, tokens: &TokenSeq) -> Result<T> {
        let out = self.backbone.forward(tokens, false)?;
        Ok(dot(&self.head_weight, &out.pooled) + self.head_bias)
    }

    pub fn score(&self, vocab: &Vocab, query: &str, passage: &str) -> Result<T> {
        self.score_tokens(&self.encode(vocab, query, passage))
    }

    /// One logit per passage; element `i` equals `score(query, passages[i])`.
    pub fn score_batch<S: AsRef<str>>(&self, vocab: &Vocab, query: &str, passages: &[S]) -> Result<Vec<T>> {
        passages.iter().map(|p| self.score(vocab, query, p.as_ref())).collect()
    }

    /// Relevance probability, `sigmoid(logit)`.
    pub fn probability(&self, vocab: &Vocab, query: &str, passage: &str) -> Result<T> {
        self.score(vocab, query, passage).map(sigmoid)
    }

    /// Scores `(passage_id, text)` candidates and returns the `top_n` best.
    pub fn rerank<S: AsRef<str>>(
        &self,
        vocab: &Vocab,
        query: &str,
        candidates: &[(S, S)],
        top_n: usize,
    ) -> Result<Vec<ScoredPassage>> {
        let texts: Vec<&str> = candidates.iter().map(|c| c.1.as_ref()).collect();
        let logits = self.score_batch(vocab, query, &texts)?;
        let scored = candidates
            .iter()
            .zip(logits)
            .map(|(c, l)| (c.0.as_ref().to_string(), l.to_f64_lossy()))
            .collect();
        Ok(rank_scored(scored, top_n))
    }

    /// Logit plus the trace needed by [`backward_into`](Self::backward_into).
    pub fn forward_train(&self, vocab: &Vocab, query: &str, passage: &str) -> Result<(T, PairTrace<T>)> {
        let out = self.backbone.forward(&self.encode(vocab, query, passage), true)?;
        let logit = dot(&self.head_weight, &out.pooled) + self.head_bias;
        let trace = out.trace.ok_or(Error::MissingTrace)?;
        Ok((logit, PairTrace { trace, pooled: out.pooled }))
    }

    /// Accumulates `dlogit · ∂logit/∂θ` into `grads`.
    pub fn backward_into(&self, trace: &PairTrace<T>, dlogit: T, grads: &mut RerankerGrads<T>) -> Result<()> {
        axpy(dlogit, &trace.pooled, &mut grads.head_weight);
        grads.head_bias += dlogit;
        let upstream: Vec<T> = self.head_weight.iter().map(|&w| w * dlogit).collect();
        self.backbone.backward_into(&trace.trace, &upstream, &mut grads.backbone)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.backbone.params.tensors_mut();
        out.push(&mut self.head_weight);
        out.push(std::slice::from_mut(&mut self.head_bias));
        out
    }

    /// Whether each tensor from [`tensors_mut`](Self::tensors_mut) is a weight matrix.
    pub fn matrix_mask(&self) -> Vec<bool> {
        let mut mask: Vec<bool> = self.backbone.params.named_tensors().iter().map(|t| t.1.len() == 2).collect();
        mask.extend([false, false]);
        mask
    }

    pub fn prune(&self, k: usize) -> Result<Self> {
        Ok(Self { backbone: self.backbone.prune(k)?, head_weight: self.head_weight.clone(), head_bias: self.head_bias })
    }

    pub fn cast<U: Scalar>(&self) -> RerankerModel<U> {
        RerankerModel {
            backbone: self.backbone.cast(),
            head_weight: self.head_weight.iter().map(|x| U::of(x.to_f64_lossy())).collect(),
            head_bias: U::of(self.head_bias.to_f64_lossy()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairTrace<T> {
    pub trace: ForwardTrace<T>,
    pub pooled: Vec<T>,
}

/// Sorts by score descending, ties by id ascending, then keeps `top_n` and assigns ranks.
pub fn rank_scored(mut scored: Vec<(String, f64)>, top_n: usize) -> Vec<ScoredPassage> {
    scored.sort_by(|a, b| cmp_score_desc(a.1, b.1).then_with(|| a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(top_n)
        .enumerate()
        .map(|(i, (passage_id, logit))| ScoredPassage { passage_id, logit, rank: i + 1 })
        .collect()
}

/// Descending order on floats with NaN sorted last.
pub fn cmp_score_desc(a: f64, b: f64) -> Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        _ => b.partial_cmp(&a).unwrap_or(Ordering::Equal),
    }
}

/// Anything that scores (query, passage) pairs: local models, remote services, test doubles.
pub trait Reranker: Send + Sync {
    fn score_batch(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>>;
    fn fingerprint(&self) -> String;
}

/// A reranker model bundled with the vocabulary it was trained with.
#[derive(Clone, Debug)]
pub struct LocalReranker<T> {
    pub model: RerankerModel<T>,
    pub vocab: Vocab,
    pub fingerprint: String,
}

impl<T: Scalar> LocalReranker<T> {
    pub fn new(model: RerankerModel<T>, vocab: Vocab) -> Self {
        let mut bytes = model.to_checkpoint().to_bytes();
        bytes.extend_from_slice(vocab.to_text().as_bytes());
        let fingerprint = crate::checkpoint::fingerprint_bytes(&bytes);
        Self { model, vocab, fingerprint }
    }
}

impl<T: Scalar> Reranker for LocalReranker<T> {
    fn score_batch(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>> {
        Ok(self
            .model
            .score_batch(&self.vocab, query, passages)?
            .into_iter()
            .map(Scalar::to_f64_lossy)
            .collect())
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xformer::{AttentionMode, Pooling};

    fn vocab() -> Vocab {
        Vocab::build(["alpha beta gamma delta epsilon zeta eta theta"], 20).unwrap()
    }

    fn model() -> RerankerModel<f64> {
        let cfg = ModelConfig {
            vocab_size: vocab().size(),
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_seq_len: 12,
            attention_mode: AttentionMode::Bidirectional,
            pooling: Pooling::Mean,
            seed: 4,
        };
        let mut m = RerankerModel::new(cfg).unwrap();
        m.head_weight = (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect();
        m
    }

    #[test]
    fn zero_head_scores_bias() {
        let mut m = model();
        m.head_weight.iter_mut().for_each(|w| *w = 0.0);
        m.head_bias = 0.25;
        for (q, p) in [("alpha", "beta"), ("gamma delta", "zeta")] {
            assert_eq!(m.score(&vocab(), q, p).unwrap(), 0.25);
        }
    }

    #[test]
    fn pad_extension_keeps_score() {
        let m = model();
        let t = m.encode(&vocab(), "alpha beta", "gamma");
        let longer = t.pad_to(12);
        let shorter = TokenSeq { ids: t.ids[..5].to_vec(), keep: t.keep[..5].to_vec() };
        let s = m.score_tokens(&t).unwrap();
        assert!((m.score_tokens(&longer).unwrap() - s).abs() <= 1e-6 * s.abs().max(1.0));
        assert!((m.score_tokens(&shorter).unwrap() - s).abs() <= 1e-6 * s.abs().max(1.0));
    }

    #[test]
    fn batch_equals_loop() {
        let m = model();
        let v = vocab();
        let passages = ["beta gamma", "eta", "theta alpha zeta"];
        let batch = m.score_batch(&v, "alpha", &passages).unwrap();
        for (p, b) in passages.iter().zip(&batch) {
            assert_eq!(m.score(&v, "alpha", p).unwrap(), *b);
        }
        assert_eq!(m.score_batch(&v, "alpha", &passages[..1]).unwrap()[0], batch[0]);
        assert!(m.score_batch::<&str>(&v, "alpha", &[]).unwrap().is_empty());
    }

    #[test]
    fn ranking_order_and_ties() {
        let r = rank_scored(vec![("d1".into(), 0.1), ("d2".into(), 0.9)], 2);
        assert_eq!(r[0].passage_id, "d2");
        assert_eq!((r[0].rank, r[1].rank), (1, 2));
        let tie = rank_scored(vec![("d2".into(), 0.5), ("d1".into(), 0.5)], 5);
        assert_eq!(tie.iter().map(|s| s.passage_id.as_str()).collect::<Vec<_>>(), ["d1", "d2"]);
        let trunc = rank_scored(vec![("a".into(), 1.0), ("b".into(), 2.0), ("c".into(), 3.0)], 2);
        assert_eq!(trunc.len(), 2);
    }

    #[test]
    fn rerank_is_monotone_invariant() {
        let m = model();
        let v = vocab();
        let cands: Vec<(String, String)> = ["beta", "gamma zeta", "eta theta", "alpha"]
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("d{i}"), t.to_string()))
            .collect();
        let ranked = m.rerank(&v, "alpha beta", &cands, 10).unwrap();
        assert_eq!(ranked.len(), 4);
        assert!(ranked.windows(2).all(|w| w[0].logit >= w[1].logit));
        let mut doubled = m.clone();
        doubled.head_weight.iter_mut().for_each(|w| *w *= 2.0);
        doubled.head_bias = 2.0 * m.head_bias + 1.0;
        let ranked2 = doubled.rerank(&v, "alpha beta", &cands, 10).unwrap();
        let ids = |r: &[ScoredPassage]| r.iter().map(|s| s.passage_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&ranked), ids(&ranked2));
    }

    #[test]
    fn from_parts_checks_head() {
        let m = model();
        assert!(RerankerModel::from_parts(m.backbone.clone(), vec![0.0; 3], 0.0).is_err());
        assert!(RerankerModel::from_parts(m.backbone.clone(), vec![f64::NAN; 8], 0.0).is_err());
    }
}
