//! TopK-PercPos hard-negative mining: the teacher's top candidates, minus
//! judged positives, minus anything scoring at or above a fixed percentage of
//! the positive's score.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biencoder::{Embedder, TextRole};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::index::VectorIndex;
use crate::scalar::dot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    pub n_negatives: usize,
    pub perc_margin: f64,
    pub candidate_pool_k: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { n_negatives: 4, perc_margin: 0.95, candidate_pool_k: 100, seed: 0 }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_negatives == 0 {
            return Err(Error::Config("mining n_negatives must be >= 1".into()));
        }
        if !(self.perc_margin > 0.0 && self.perc_margin <= 1.0) {
            return Err(Error::Config(format!("perc_margin must be in (0, 1], got {}", self.perc_margin)));
        }
        if self.candidate_pool_k == 0 {
            return Err(Error::Config("candidate_pool_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// One mined training list, persisted as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinedExample {
    pub query_id: String,
    #[serde(rename = "pos")]
    pub positive_id: String,
    #[serde(rename = "negs")]
    pub negative_ids: Vec<String>,
    #[serde(rename = "scores")]
    pub teacher_scores: BTreeMap<String, f64>,
    /// Trailing negatives that came from random backfill rather than the filter.
    #[serde(skip)]
    pub n_backfilled: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningStats {
    pub skipped_no_positive: usize,
    pub non_positive_threshold: usize,
    pub backfilled: usize,
}

/// Applies the margin filter to teacher candidates given in descending score order.
///
/// Returns the kept `(id, score)` pairs and whether the percentage threshold was
/// applied (it is skipped when the positive score is not positive).
pub fn select_negatives(
    positive_score: f64,
    candidates: &[(String, f64)],
    excluded: &BTreeSet<&str>,
    cfg: &MiningConfig,
) -> (Vec<(String, f64)>, bool) {
    let apply = positive_score > 0.0;
    let ceiling = cfg.perc_margin * positive_score;
    let kept = candidates
        .iter()
        .filter(|(id, _)| !excluded.contains(id.as_str()))
        .filter(|(_, s)| !apply || *s < ceiling)
        .take(cfg.n_negatives)
        .cloned()
        .collect();
    (kept, apply)
}

/// Mines `cfg.n_negatives` per judged (query, positive) pair, ordered by query id then positive id.
pub fn mine_negatives(
    teacher: &dyn Embedder,
    index: &VectorIndex,
    dataset: &Dataset,
    cfg: &MiningConfig,
) -> Result<(Vec<MinedExample>, MiningStats)> {
    cfg.validate()?;
    let mut stats = MiningStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut queries: Vec<_> = dataset.queries.iter().collect();
    queries.sort_by(|a, b| a.id.cmp(&b.id));
    let texts: Vec<&str> = queries.iter().map(|q| q.text.as_str()).collect();
    let query_vecs = teacher.embed_texts(&texts, TextRole::Query)?;
    let mut out = Vec::new();
    for (query, qv) in queries.iter().zip(&query_vecs) {
        let relevant = dataset.qrels.relevant(&query.id);
        if relevant.is_empty() {
            stats.skipped_no_positive += 1;
            continue;
        }
        let pool: Vec<(String, f64)> = index
            .search_exact(qv, cfg.candidate_pool_k)?
            .into_iter()
            .map(|h| (h.passage_id, h.score as f64))
            .collect();
        for &pos in &relevant {
            let pv = index
                .vector(pos)
                .ok_or_else(|| Error::InvalidInput(format!("positive `{pos}` is not in the index")))?;
            let pos_score = dot(qv, pv) as f64;
            let (kept, applied) = select_negatives(pos_score, &pool, &relevant, cfg);
            if !applied {
                stats.non_positive_threshold += 1;
                log::warn!("query {}: positive score {pos_score} <= 0, threshold skipped", query.id);
            }
            let mut negatives: Vec<String> = kept.iter().map(|k| k.0.clone()).collect();
            let mut scores: BTreeMap<String, f64> = kept.into_iter().collect();
            scores.insert(pos.to_string(), pos_score);
            let n_filtered = negatives.len();
            let shortfall = cfg.n_negatives.saturating_sub(n_filtered);
            if shortfall > 0 {
                let mut pool_ids: Vec<&String> = index
                    .ids()
                    .iter()
                    .filter(|id| !relevant.contains(id.as_str()) && !negatives.contains(id))
                    .collect();
                pool_ids.shuffle(&mut rng);
                for id in pool_ids.into_iter().take(shortfall) {
                    let s = dot(qv, index.vector(id).expect("id from index")) as f64;
                    scores.insert(id.clone(), s);
                    negatives.push(id.clone());
                }
            }
            let n_backfilled = negatives.len() - n_filtered;
            stats.backfilled += n_backfilled;
            out.push(MinedExample {
                query_id: query.id.clone(),
                positive_id: pos.to_string(),
                negative_ids: negatives,
                teacher_scores: scores,
                n_backfilled,
            });
        }
    }
    Ok((out, stats))
}

pub fn save_mined(path: &Path, mined: &[MinedExample]) -> Result<()> {
    let mut buf = Vec::new();
    for m in mined {
        serde_json::to_writer(&mut buf, m).map_err(|e| Error::Format(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_mined(path: &Path) -> Result<Vec<MinedExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
