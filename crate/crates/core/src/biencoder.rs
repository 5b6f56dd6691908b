//! Bi-encoder: shared bidirectional backbone → mean pool → projection → L2
//! normalization, plus its in-batch + hard-negative contrastive trainer.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{matrix_from, Checkpoint};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::losses::Temperature;
use crate::mining::MinedExample;
use crate::optim::{AdamW, OptimConfig};
use crate::scalar::{dot, l2_norm, log_sum_exp, Scalar};
use crate::tensor::Matrix;
use crate::tokenizer::{encode, Vocab};
use crate::train::TrainLog;
use crate::xformer::{AttentionMode, Backbone, ForwardTrace, ModelConfig, ParameterSet};

/// Whether a text is embedded as a query or as a passage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextRole {
    Query,
    Passage,
}

/// Unit-norm embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<T>(pub Vec<T>);

impl<T: Scalar> Embedding<T> {
    pub fn cosine(&self, other: &Self) -> T {
        dot(&self.0, &other.0)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|x| x.to_f64_lossy() as f32).collect()
    }
}

/// Optional role prefixes; empty by default so queries and passages share one function.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderOptions {
    #[serde(default)]
    pub query_prefix: String,
    #[serde(default)]
    pub passage_prefix: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderModel<T> {
    pub backbone: Backbone<T>,
    /// `[d_model × d_embed]`
    pub projection: Matrix<T>,
    pub options: EmbedderOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderGrads<T> {
    pub backbone: ParameterSet<T>,
    pub projection: Matrix<T>,
}

impl<T: Scalar> EmbedderGrads<T> {
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = self.backbone.named_tensors().into_iter().map(|t| t.2).collect();
        out.push(self.projection.as_slice());
        out
    }
}

/// Trace of one embedded text, kept for the backward pass.
pub struct EmbedTrace<T> {
    trace: ForwardTrace<T>,
    pooled: Vec<T>,
    projected_norm: T,
    embedding: Vec<T>,
}

impl<T: Scalar> EmbedderModel<T> {
    /// Random backbone and N(0, 1/d_model) projection drawn from the config seed.
    pub fn new(config: ModelConfig, d_embed: usize) -> Result<Self> {
        if config.attention_mode != AttentionMode::Bidirectional {
            return Err(Error::Config("embedder backbones use bidirectional attention".into()));
        }
        if d_embed == 0 {
            return Err(Error::Config("d_embed must be positive".into()));
        }
        let backbone = Backbone::new(config)?;
        let d = backbone.config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(backbone.config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..d * d_embed).map(|_| T::of(normal.sample(&mut rng))).collect();
        Ok(Self { backbone, projection: Matrix::from_vec(d, d_embed, data), options: EmbedderOptions::default() })
    }

    pub fn d_embed(&self) -> usize {
        self.projection.cols()
    }

    fn prefixed(&self, text: &str, role: TextRole) -> String {
        let prefix = match role {
            TextRole::Query => &self.options.query_prefix,
            TextRole::Passage => &self.options.passage_prefix,
        };
        if prefix.is_empty() {
            text.to_string()
        } else {
            format!("{prefix} {text}")
        }
    }

    fn project(&self, pooled: &[T]) -> Vec<T> {
        let mut z = vec![T::zero(); self.d_embed()];
        for (k, &p) in pooled.iter().enumerate() {
            for (zj, &w) in z.iter_mut().zip(self.projection.row(k)) {
                *zj += p * w;
            }
        }
        z
    }

    pub fn embed(&self, vocab: &Vocab, text: &str) -> Result<Embedding<T>> {
        self.embed_as(vocab, text, TextRole::Passage)
    }

    pub fn embed_as(&self, vocab: &Vocab, text: &str, role: TextRole) -> Result<Embedding<T>> {
        let tokens = encode(vocab, &self.prefixed(text, role), self.backbone.config.max_seq_len);
        let out = self.backbone.forward(&tokens, false)?;
        let mut z = self.project(&out.pooled);
        let n = l2_norm(&z);
        if n > T::zero() {
            z.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Embedding(z))
    }

    pub fn embed_train(&self, vocab: &Vocab, text: &str, role: TextRole) -> Result<EmbedTrace<T>> {
        let tokens = encode(vocab, &self.prefixed(text, role), self.backbone.config.max_seq_len);
        let out = self.backbone.forward(&tokens, true)?;
        let z = self.project(&out.pooled);
        let n = l2_norm(&z);
        let embedding = if n > T::zero() { z.iter().map(|&x| x / n).collect() } else { z };
        Ok(EmbedTrace { trace: out.trace.ok_or(Error::MissingTrace)?, pooled: out.pooled, projected_norm: n, embedding })
    }

    /// Backpropagates `d loss / d embedding`. At a zero projection the
    /// normalization passes the gradient through unchanged.
    pub fn backward_into(&self, t: &EmbedTrace<T>, d_embedding: &[T], grads: &mut EmbedderGrads<T>) -> Result<()> {
        let dz: Vec<T> = if t.projected_norm > T::zero() {
            let proj = dot(&t.embedding, d_embedding);
            d_embedding
                .iter()
                .zip(&t.embedding)
                .map(|(&g, &e)| (g - e * proj) / t.projected_norm)
                .collect()
        } else {
            d_embedding.to_vec()
        };
        let mut dpooled = vec![T::zero(); t.pooled.len()];
        for (k, &p) in t.pooled.iter().enumerate() {
            let w = self.projection.row(k);
            let g = grads.projection.row_mut(k);
            let mut acc = T::zero();
            for j in 0..dz.len() {
                g[j] += p * dz[j];
                acc += w[j] * dz[j];
            }
            dpooled[k] = acc;
        }
        self.backbone.backward_into(&t.trace, &dpooled, &mut grads.backbone)
    }

    pub fn zero_grads(&self) -> EmbedderGrads<T> {
        EmbedderGrads {
            backbone: ParameterSet::zeros(&self.backbone.config),
            projection: Matrix::zeros(self.projection.rows(), self.projection.cols()),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.backbone.params.tensors_mut();
        out.push(self.projection.as_mut_slice());
        out
    }

    pub fn matrix_mask(&self) -> Vec<bool> {
        let mut mask: Vec<bool> = self.backbone.params.named_tensors().iter().map(|t| t.1.len() == 2).collect();
        mask.push(true);
        mask
    }

    pub fn prune(&self, k: usize) -> Result<Self> {
        Ok(Self { backbone: self.backbone.prune(k)?, projection: self.projection.clone(), options: self.options.clone() })
    }

    pub fn cast<U: Scalar>(&self) -> EmbedderModel<U> {
        EmbedderModel { backbone: self.backbone.cast(), projection: self.projection.cast(), options: self.options.clone() }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let extra = serde_json::to_value(&self.options).expect("options serialize");
        let mut ck = Checkpoint::from_backbone("embedder", &self.backbone, extra);
        ck.push("projection", vec![self.projection.rows(), self.projection.cols()], self.projection.as_slice());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind() != Some("embedder") {
            return Err(Error::Format(format!("expected an embedder checkpoint, found {:?}", ck.kind())));
        }
        let backbone: Backbone<T> = ck.to_backbone()?;
        let projection = matrix_from(ck.tensor("projection")?)?;
        if projection.rows() != backbone.config.d_model {
            return Err(Error::Shape("projection rows must equal d_model".into()));
        }
        let options = match ck.extra() {
            serde_json::Value::Null => EmbedderOptions::default(),
            v => serde_json::from_value(v).map_err(|e| Error::Format(e.to_string()))?,
        };
        Ok(Self { backbone, projection, options })
    }
}

/// Source of unit-norm `f32` embeddings: local models, remote services, test doubles.
pub trait Embedder: Send + Sync {
    fn embed_texts(&self, texts: &[&str], role: TextRole) -> Result<Vec<Vec<f32>>>;
    fn dim(&self) -> usize;
    /// Identifies the exact model; stored in indices to catch mismatches.
    fn fingerprint(&self) -> String;
}

/// An embedder model bundled with its vocabulary.
#[derive(Clone, Debug)]
pub struct LocalEmbedder<T> {
    pub model: EmbedderModel<T>,
    pub vocab: Vocab,
    pub fingerprint: String,
}

impl<T: Scalar> LocalEmbedder<T> {
    pub fn new(model: EmbedderModel<T>, vocab: Vocab) -> Self {
        let mut bytes = model.to_checkpoint().to_bytes();
        bytes.extend_from_slice(vocab.to_text().as_bytes());
        let fingerprint = crate::checkpoint::fingerprint_bytes(&bytes);
        Self { model, vocab, fingerprint }
    }
}

impl<T: Scalar> Embedder for LocalEmbedder<T> {
    fn embed_texts(&self, texts: &[&str], role: TextRole) -> Result<Vec<Vec<f32>>> {
        texts
            .iter()
            .map(|t| self.model.embed_as(&self.vocab, t, role).map(|e| e.to_f32()))
            .collect()
    }

    fn dim(&self) -> usize {
        self.model.d_embed()
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiencoderTrainConfig {
    pub d_embed: usize,
    #[serde(default)]
    pub temperature: Temperature,
    pub steps: usize,
    /// Queries per step; their positives act as in-batch negatives for each other.
    pub batch_size: usize,
    /// Mined hard negatives used per query (0 = in-batch only).
    #[serde(default)]
    pub n_hard: usize,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub zero_projection: bool,
}

impl Default for BiencoderTrainConfig {
    fn default() -> Self {
        Self {
            d_embed: 32,
            temperature: Temperature::default(),
            steps: 2000,
            batch_size: 32,
            n_hard: 0,
            optim: OptimConfig::default(),
            seed: 0,
            zero_projection: false,
        }
    }
}

/// One contrastive batch: each query's target is one of the shared candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub queries: Vec<String>,
    pub candidates: Vec<String>,
    pub targets: Vec<usize>,
    /// Per query, candidate indices that are judged relevant but are not its target.
    pub excluded: Vec<Vec<usize>>,
}

/// Mean InfoNCE over cosine/τ scores and its gradient.
pub fn contrastive_loss<T: Scalar>(
    model: &EmbedderModel<T>,
    vocab: &Vocab,
    batch: &ContrastiveBatch,
    tau: Temperature,
) -> Result<(T, EmbedderGrads<T>)> {
    if batch.queries.is_empty() {
        return Err(Error::InvalidInput("empty contrastive batch".into()));
    }
    let q: Vec<EmbedTrace<T>> =
        batch.queries.iter().map(|t| model.embed_train(vocab, t, TextRole::Query)).collect::<Result<_>>()?;
    let p: Vec<EmbedTrace<T>> =
        batch.candidates.iter().map(|t| model.embed_train(vocab, t, TextRole::Passage)).collect::<Result<_>>()?;
    let inv_tau = T::one() / T::of(tau.get());
    let weight = T::one() / T::of_usize(q.len());
    let d = model.d_embed();
    let mut dq = vec![vec![T::zero(); d]; q.len()];
    let mut dp = vec![vec![T::zero(); d]; p.len()];
    let mut total = T::zero();
    for (i, qi) in q.iter().enumerate() {
        let allowed: Vec<usize> = (0..p.len()).filter(|c| !batch.excluded[i].contains(c)).collect();
        let scores: Vec<T> = allowed.iter().map(|&c| dot(&qi.embedding, &p[c].embedding) * inv_tau).collect();
        let lse = log_sum_exp(&scores);
        let target_pos = allowed
            .iter()
            .position(|&c| c == batch.targets[i])
            .ok_or_else(|| Error::InvalidInput("target candidate excluded".into()))?;
        total += lse - scores[target_pos];
        for (a, &c) in allowed.iter().enumerate() {
            let mut g = (scores[a] - lse).exp();
            if a == target_pos {
                g -= T::one();
            }
            let g = g * weight * inv_tau;
            for j in 0..d {
                dq[i][j] += g * p[c].embedding[j];
                dp[c][j] += g * qi.embedding[j];
            }
        }
    }
    let mut grads = model.zero_grads();
    for (t, g) in q.iter().zip(&dq).chain(p.iter().zip(&dp)) {
        model.backward_into(t, g, &mut grads)?;
    }
    Ok((total * weight, grads))
}

/// Builds step batches from (query, positive) pairs plus optional mined negatives.
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    pairs: Vec<(usize, String)>,
    hard: HashMap<(&'a str, &'a str), &'a [String]>,
    n_hard: usize,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a Dataset, mined: Option<&'a [MinedExample]>, n_hard: usize, seed: u64) -> Result<Self> {
        let qpos: BTreeMap<&str, usize> = dataset.queries.iter().enumerate().map(|(i, q)| (q.id.as_str(), i)).collect();
        let mut pairs = Vec::new();
        for (qid, judged) in &dataset.qrels.judgments {
            if let Some(&qi) = qpos.get(qid.as_str()) {
                for (pid, &g) in judged {
                    if g > 0 {
                        pairs.push((qi, pid.clone()));
                    }
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::InvalidInput("training set has no (query, positive) pairs".into()));
        }
        let hard = mined
            .unwrap_or(&[])
            .iter()
            .map(|m| ((m.query_id.as_str(), m.positive_id.as_str()), m.negative_ids.as_slice()))
            .collect();
        Ok(Self { dataset, pairs, hard, n_hard, cursor: usize::MAX, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    fn next_pair(&mut self) -> (usize, String) {
        if self.cursor >= self.pairs.len() {
            self.pairs.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.pairs[self.cursor - 1].clone()
    }

    pub fn next_batch(&mut self, batch_size: usize) -> ContrastiveBatch {
        let passages = self.dataset.passage_index();
        let mut chosen: Vec<(usize, String)> = Vec::with_capacity(batch_size);
        let mut draws = 0;
        while chosen.len() < batch_size && draws < 4 * self.pairs.len() {
            draws += 1;
            let pair = self.next_pair();
            if !chosen.iter().any(|c| c.0 == pair.0) {
                chosen.push(pair);
            }
        }
        let mut cand_ids: Vec<String> = Vec::new();
        let slot = |id: &str, ids: &mut Vec<String>| match ids.iter().position(|x| x == id) {
            Some(i) => i,
            None => {
                ids.push(id.to_string());
                ids.len() - 1
            }
        };
        let targets: Vec<usize> = chosen.iter().map(|(_, pid)| slot(pid, &mut cand_ids)).collect();
        for (qi, pid) in &chosen {
            let qid = self.dataset.queries[*qi].id.as_str();
            if let Some(negs) = self.hard.get(&(qid, pid.as_str())) {
                for n in negs.iter().take(self.n_hard) {
                    slot(n, &mut cand_ids);
                }
            }
        }
        let excluded = chosen
            .iter()
            .zip(&targets)
            .map(|((qi, _), &t)| {
                let relevant = self.dataset.qrels.relevant(&self.dataset.queries[*qi].id);
                (0..cand_ids.len()).filter(|&c| c != t && relevant.contains(cand_ids[c].as_str())).collect()
            })
            .collect();
        ContrastiveBatch {
            queries: chosen.iter().map(|(qi, _)| self.dataset.queries[*qi].text.clone()).collect(),
            candidates: cand_ids.iter().map(|id| passages[id.as_str()].full_text()).collect(),
            targets,
            excluded,
        }
    }
}

/// Trains a bi-encoder with in-batch negatives plus, when given, mined hard negatives.
pub fn train_biencoder<T: Scalar>(
    dataset: &Dataset,
    mined: Option<&[MinedExample]>,
    vocab: &Vocab,
    model_config: ModelConfig,
    cfg: &BiencoderTrainConfig,
) -> Result<(EmbedderModel<T>, TrainLog)> {
    let mut model = EmbedderModel::<T>::new(model_config, cfg.d_embed)?;
    if cfg.zero_projection {
        model.projection.fill_zero();
    }
    let mut sampler = BatchSampler::new(dataset, mined, cfg.n_hard, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optim.clone(), cfg.steps);
    let mask = model.matrix_mask();
    let mut log = TrainLog::default();
    for _ in 0..cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size.max(1));
        let (loss, grads) = contrastive_loss(&model, vocab, &batch, cfg.temperature)?;
        log.losses.push(loss.to_f64_lossy());
        opt.step(model.tensors_mut(), &grads.tensors(), &mask);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xformer::Pooling;

    fn cfg(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            max_seq_len: 10,
            attention_mode: AttentionMode::Bidirectional,
            pooling: Pooling::Mean,
            seed: 3,
        }
    }

    fn vocab() -> Vocab {
        Vocab::build(["red green blue cyan magenta yellow black white"], 16).unwrap()
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let v = vocab();
        let m = EmbedderModel::<f64>::new(cfg(v.size()), 6).unwrap();
        let a = m.embed(&v, "red green").unwrap();
        assert!((l2_norm(&a.0) - 1.0).abs() < 1e-12);
        assert_eq!(a, m.embed(&v, "red green").unwrap());
        let b = m.embed(&v, "blue").unwrap();
        let explicit = dot(&a.0, &b.0) / (l2_norm(&a.0) * l2_norm(&b.0));
        assert!((a.cosine(&b) - explicit).abs() < 1e-12);
    }

    #[test]
    fn causal_backbone_is_rejected() {
        let mut c = cfg(16);
        c.attention_mode = AttentionMode::Causal;
        assert!(EmbedderModel::<f64>::new(c, 4).is_err());
    }

    #[test]
    fn query_prefix_is_opt_in() {
        let v = vocab();
        let mut m = EmbedderModel::<f64>::new(cfg(v.size()), 6).unwrap();
        assert_eq!(m.embed_as(&v, "red", TextRole::Query).unwrap(), m.embed_as(&v, "red", TextRole::Passage).unwrap());
        m.options.query_prefix = "cyan".into();
        assert_ne!(m.embed_as(&v, "red", TextRole::Query).unwrap(), m.embed_as(&v, "red", TextRole::Passage).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let v = vocab();
        let mut m = EmbedderModel::<f64>::new(cfg(v.size()), 5).unwrap();
        m.options.passage_prefix = "doc".into();
        let back = EmbedderModel::<f64>::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn contrastive_gradient_matches_finite_difference() {
        let v = vocab();
        let mut m = EmbedderModel::<f64>::new(cfg(v.size()), 4).unwrap();
        let batch = ContrastiveBatch {
            queries: vec!["red".into(), "blue cyan".into()],
            candidates: vec!["red green".into(), "cyan blue".into(), "black".into()],
            targets: vec![0, 1],
            excluded: vec![vec![], vec![2]],
        };
        let tau = Temperature::new(0.5).unwrap();
        let (_, grads) = contrastive_loss(&m, &v, &batch, tau).unwrap();
        let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(<[f64]>::to_vec).collect();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for t in 0..analytic.len() {
            for j in 0..analytic[t].len() {
                let orig = m.tensors_mut()[t][j];
                m.tensors_mut()[t][j] = orig + h;
                let up = contrastive_loss(&m, &v, &batch, tau).unwrap().0;
                m.tensors_mut()[t][j] = orig - h;
                let down = contrastive_loss(&m, &v, &batch, tau).unwrap().0;
                m.tensors_mut()[t][j] = orig;
                let fd = (up - down) / (2.0 * h);
                worst = worst.max((fd - analytic[t][j]).abs() / fd.abs().max(analytic[t][j].abs()).max(1e-3));
            }
        }
        assert!(worst < 1e-4, "{worst:e}");
    }
}
