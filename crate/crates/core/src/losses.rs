//! Point-wise BCE and list-wise InfoNCE with gradients w.r.t. the logits,
//! plus the batched objective that backpropagates into a reranker.

use serde::{Deserialize, Serialize};

use crate::crossencoder::{RerankerGrads, RerankerModel};
use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, sigmoid, softplus, Scalar};
use crate::tokenizer::Vocab;

/// Softmax temperature, strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const DEFAULT: Temperature = Temperature(0.05);

    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(Error::Config(format!("temperature must be positive and finite, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    InfoNce,
}

/// Returns `(loss, dloss/dlogit)` for `p = sigmoid(logit)` against label `y`.
pub fn bce_loss<T: Scalar>(logit: T, y: bool) -> (T, T) {
    let loss = if y { softplus(-logit) } else { softplus(logit) };
    let target = if y { T::one() } else { T::zero() };
    (loss, sigmoid(logit) - target)
}

/// Returns the loss and gradients w.r.t. `[pos, neg_1, .., neg_N]`.
pub fn infonce_loss<T: Scalar>(pos: T, negs: &[T], tau: Temperature) -> Result<(T, Vec<T>)> {
    if negs.is_empty() {
        return Err(Error::InvalidInput("InfoNCE needs at least one negative".into()));
    }
    let inv_tau = T::one() / T::of(tau.get());
    let scaled: Vec<T> = std::iter::once(pos).chain(negs.iter().copied()).map(|x| x * inv_tau).collect();
    let lse = log_sum_exp(&scaled);
    let loss = lse - scaled[0];
    let mut grads: Vec<T> = scaled.iter().map(|&s| (s - lse).exp() * inv_tau).collect();
    grads[0] -= inv_tau;
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub query: String,
    pub passage: String,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListExample {
    pub query: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

impl ListExample {
    pub fn validate(&self) -> Result<()> {
        if self.negatives.is_empty() {
            return Err(Error::InvalidInput("list example needs N >= 1 negatives".into()));
        }
        if self.negatives.contains(&self.positive) {
            return Err(Error::InvalidInput("positive passage repeated among negatives".into()));
        }
        Ok(())
    }

    /// The same data expanded into BCE pairs.
    pub fn to_pairs(&self) -> Vec<PairExample> {
        std::iter::once(PairExample { query: self.query.clone(), passage: self.positive.clone(), label: true })
            .chain(self.negatives.iter().map(|n| PairExample {
                query: self.query.clone(),
                passage: n.clone(),
                label: false,
            }))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Example {
    Pair(PairExample),
    List(ListExample),
}

/// Mean loss over `batch` and its gradient w.r.t. every reranker parameter.
///
/// All examples must be of one kind: pairs train with BCE, lists with InfoNCE.
pub fn batch_loss<T: Scalar>(
    model: &RerankerModel<T>,
    vocab: &Vocab,
    batch: &[Example],
    tau: Temperature,
) -> Result<(T, RerankerGrads<T>)> {
    let mut grads = RerankerGrads::zeros_like(model);
    let loss = batch_loss_into(model, vocab, batch, tau, &mut grads)?;
    Ok((loss, grads))
}

pub fn batch_loss_into<T: Scalar>(
    model: &RerankerModel<T>,
    vocab: &Vocab,
    batch: &[Example],
    tau: Temperature,
    grads: &mut RerankerGrads<T>,
) -> Result<T> {
    let first = batch.first().ok_or_else(|| Error::InvalidInput("empty training batch".into()))?;
    let is_pair = matches!(first, Example::Pair(_));
    if batch.iter().any(|e| matches!(e, Example::Pair(_)) != is_pair) {
        return Err(Error::InvalidInput("batch mixes pair and list examples".into()));
    }
    let weight = T::one() / T::of_usize(batch.len());
    let mut total = T::zero();
    for example in batch {
        match example {
            Example::Pair(p) => {
                let (logit, trace) = model.forward_train(vocab, &p.query, &p.passage)?;
                let (loss, g) = bce_loss(logit, p.label);
                total += loss;
                model.backward_into(&trace, g * weight, grads)?;
            }
            Example::List(l) => {
                l.validate()?;
                let (pos, pos_trace) = model.forward_train(vocab, &l.query, &l.positive)?;
                let mut neg_logits = Vec::with_capacity(l.negatives.len());
                let mut traces = Vec::with_capacity(l.negatives.len());
                for n in &l.negatives {
                    let (logit, trace) = model.forward_train(vocab, &l.query, n)?;
                    neg_logits.push(logit);
                    traces.push(trace);
                }
                let (loss, g) = infonce_loss(pos, &neg_logits, tau)?;
                total += loss;
                model.backward_into(&pos_trace, g[0] * weight, grads)?;
                for (trace, gi) in traces.iter().zip(&g[1..]) {
                    model.backward_into(trace, *gi * weight, grads)?;
                }
            }
        }
    }
    Ok(total * weight)
}
