//! Reranker fine-tuning on mined lists with either loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::crossencoder::RerankerModel;
use crate::error::{Error, Result};
use crate::losses::{batch_loss_into, Example, ListExample, LossKind, Temperature};
use crate::mining::MinedExample;
use crate::optim::{AdamW, OptimConfig};
use crate::crossencoder::RerankerGrads;
use crate::scalar::Scalar;
use crate::tokenizer::Vocab;
use crate::xformer::ModelConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean of the last `n` recorded losses.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankerTrainConfig {
    pub loss: LossKind,
    #[serde(default)]
    pub temperature: Temperature,
    /// Negatives per list (N).
    #[serde(default = "default_n")]
    pub n_negatives: usize,
    /// How many of the N slots hold random corpus passages instead of mined ones.
    pub random_negatives: usize,
    pub steps: usize,
    /// Lists per step. BCE sees the same lists expanded to `1 + N` pairs each.
    pub batch_size: usize,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_n() -> usize {
    4
}

impl Default for RerankerTrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::InfoNce,
            temperature: Temperature::default(),
            n_negatives: default_n(),
            random_negatives: 2,
            steps: 4000,
            batch_size: 8,
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

/// Resolves mined ids to texts. Each list keeps the first `n_negatives - n_random`
/// mined negatives and fills the remaining `n_random` slots with passages drawn
/// uniformly from the corpus, excluding judged-relevant ones and repeats.
pub fn build_list_examples(
    dataset: &Dataset,
    mined: &[MinedExample],
    n_negatives: usize,
    n_random: usize,
    seed: u64,
) -> Result<Vec<ListExample>> {
    if n_random > n_negatives {
        return Err(Error::Config(format!("random_negatives ({n_random}) exceeds n_negatives ({n_negatives})")));
    }
    let n_hard = n_negatives - n_random;
    let passages = dataset.passage_index();
    let queries: std::collections::HashMap<&str, &str> =
        dataset.queries.iter().map(|q| (q.id.as_str(), q.text.as_str())).collect();
    let text = |id: &str| {
        passages
            .get(id)
            .map(|p| p.full_text())
            .ok_or_else(|| Error::InvalidInput(format!("mined passage `{id}` is not in the corpus")))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c69_7374);
    mined
        .iter()
        .map(|m| {
            if m.negative_ids.len() < n_hard {
                return Err(Error::InvalidInput(format!(
                    "query {} has {} mined negatives, {n_hard} required",
                    m.query_id,
                    m.negative_ids.len()
                )));
            }
            let query = queries
                .get(m.query_id.as_str())
                .ok_or_else(|| Error::InvalidInput(format!("mined query `{}` is unknown", m.query_id)))?;
            let mut ids: Vec<&str> = m.negative_ids[..n_hard].iter().map(String::as_str).collect();
            let relevant = dataset.qrels.relevant(&m.query_id);
            let eligible = dataset.passages.len().saturating_sub(relevant.len().max(1) + ids.len());
            if eligible < n_random {
                return Err(Error::InvalidInput(format!("corpus too small for {n_random} random negatives")));
            }
            while ids.len() < n_negatives {
                let candidate = dataset.passages[rng.random_range(0..dataset.passages.len())].id.as_str();
                if candidate != m.positive_id && !relevant.contains(candidate) && !ids.contains(&candidate) {
                    ids.push(candidate);
                }
            }
            Ok(ListExample {
                query: query.to_string(),
                positive: text(&m.positive_id)?,
                negatives: ids.into_iter().map(text).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Trains a fresh reranker. BCE and InfoNCE runs with equal configs consume the
/// same lists in the same order and perform the same number of forward passes.
pub fn train_reranker<T: Scalar>(
    examples: &[ListExample],
    vocab: &Vocab,
    model_config: ModelConfig,
    cfg: &RerankerTrainConfig,
) -> Result<(RerankerModel<T>, TrainLog)> {
    let model = RerankerModel::<T>::new(model_config)?;
    continue_training(model, examples, vocab, cfg)
}

pub fn continue_training<T: Scalar>(
    mut model: RerankerModel<T>,
    examples: &[ListExample],
    vocab: &Vocab,
    cfg: &RerankerTrainConfig,
) -> Result<(RerankerModel<T>, TrainLog)> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let lists: Vec<ListExample> = examples
        .iter()
        .map(|e| {
            e.validate()?;
            let mut e = e.clone();
            e.negatives.truncate(cfg.n_negatives);
            if e.negatives.is_empty() {
                return Err(Error::Config("n_negatives must be >= 1".into()));
            }
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = AdamW::new(cfg.optim.clone(), cfg.steps);
    let mask = model.matrix_mask();
    let mut grads = RerankerGrads::zeros_like(&model);
    let mut log = TrainLog::default();
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size * (1 + cfg.n_negatives));
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..lists.len()).collect();
                order.shuffle(&mut rng);
            }
            let list = &lists[order.pop().expect("refilled above")];
            match cfg.loss {
                LossKind::InfoNce => batch.push(Example::List(list.clone())),
                LossKind::Bce => batch.extend(list.to_pairs().into_iter().map(Example::Pair)),
            }
        }
        grads.fill_zero();
        let loss = batch_loss_into(&model, vocab, &batch, cfg.temperature, &mut grads)?;
        log.losses.push(loss.to_f64_lossy());
        opt.step(model.tensors_mut(), &grads.tensors(), &mask);
        if !model.is_finite() {
            return Err(Error::InvalidInput("training diverged: non-finite parameters".into()));
        }
    }
    Ok((model, log))
}
