//! Mined negatives against exhaustive scoring of the whole corpus.

mod common;

use std::collections::BTreeSet;

use stagerank_core::biencoder::{Embedder, TextRole};
use stagerank_core::corpus::Dataset;
use stagerank_core::index::VectorIndex;
use stagerank_core::mining::{load_mined, mine_negatives, save_mined, MiningConfig};
use stagerank_core::pipeline::run_indexing;

/// Every passage scored against every query; returns, per (query, positive),
/// the ids passing the margin filter in (score desc, id asc) order.
fn brute_force(teacher: &dyn Embedder, index: &VectorIndex, dataset: &Dataset, perc: f64) -> Vec<(String, String, Vec<String>)> {
    let pvecs: Vec<&[f32]> = dataset.passages.iter().map(|p| index.vector(&p.id).unwrap()).collect();
    let mut queries: Vec<_> = dataset.queries.iter().collect();
    queries.sort_by(|a, b| a.id.cmp(&b.id));
    let texts: Vec<&str> = queries.iter().map(|q| q.text.as_str()).collect();
    let qvecs = teacher.embed_texts(&texts, TextRole::Query).unwrap();
    let mut out = Vec::new();
    for (q, qv) in queries.iter().zip(&qvecs) {
        let score = |v: &[f32]| v.iter().zip(qv).map(|(a, b)| a * b).sum::<f32>() as f64;
        let relevant: BTreeSet<&str> = dataset.qrels.relevant(&q.id);
        for &pos in &relevant {
            let p_idx = dataset.passages.iter().position(|p| p.id == pos).unwrap();
            let pos_score = score(pvecs[p_idx]);
            let ceiling = if pos_score > 0.0 { perc * pos_score } else { f64::INFINITY };
            let mut survivors: Vec<(f64, &str)> = dataset
                .passages
                .iter()
                .zip(&pvecs)
                .map(|(p, v)| (score(v), p.id.as_str()))
                .filter(|(s, id)| !relevant.contains(id) && *s < ceiling)
                .collect();
            survivors.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
            out.push((q.id.clone(), pos.to_string(), survivors.into_iter().map(|s| s.1.to_string()).collect()));
        }
    }
    out
}

#[test]
fn mined_sets_equal_exhaustive_filter() {
    let data = common::dataset(21, 60, 300);
    let (teacher, _) = common::embedder(&data, 150, 3);
    let (index, _) = run_indexing(&data, &teacher, 64).unwrap();
    let oracle = brute_force(&teacher, &index, &data, 0.95);

    // A pool covering the corpus makes mining an exhaustive filter.
    let cfg = MiningConfig { n_negatives: 4, candidate_pool_k: data.passages.len(), seed: 1, ..Default::default() };
    let (mined, stats) = mine_negatives(&teacher, &index, &data, &cfg).unwrap();
    assert_eq!(mined.len(), oracle.len());
    for (m, (qid, pos, survivors)) in mined.iter().zip(&oracle) {
        assert_eq!((&m.query_id, &m.positive_id), (qid, pos));
        let n_filtered = m.negative_ids.len() - m.n_backfilled;
        assert_eq!(n_filtered, survivors.len().min(4));
        assert_eq!(m.negative_ids[..n_filtered], survivors[..n_filtered]);
    }
    assert_eq!(stats.backfilled, mined.iter().map(|m| m.n_backfilled).sum::<usize>());

    // With the default pool, whatever the filter keeps is still the exhaustive prefix.
    let cfg = MiningConfig { n_negatives: 4, seed: 1, ..Default::default() };
    let (mined, _) = mine_negatives(&teacher, &index, &data, &cfg).unwrap();
    for (m, (_, _, survivors)) in mined.iter().zip(&oracle) {
        let n_filtered = m.negative_ids.len() - m.n_backfilled;
        assert_eq!(m.negative_ids[..n_filtered], survivors[..n_filtered]);
    }
}

#[test]
fn negatives_respect_qrels_threshold_and_seed() {
    let data = common::dataset(22, 40, 200);
    let (teacher, _) = common::embedder(&data, 100, 4);
    let (index, _) = run_indexing(&data, &teacher, 64).unwrap();
    let cfg = MiningConfig { n_negatives: 6, seed: 8, ..Default::default() };
    let (mined, _) = mine_negatives(&teacher, &index, &data, &cfg).unwrap();
    for m in &mined {
        let relevant = data.qrels.relevant(&m.query_id);
        assert_eq!(m.negative_ids.len(), 6);
        assert!(m.negative_ids.iter().all(|n| !relevant.contains(n.as_str())));
        let pos = m.teacher_scores[&m.positive_id];
        let n_filtered = m.negative_ids.len() - m.n_backfilled;
        for n in &m.negative_ids[..n_filtered] {
            assert!(m.teacher_scores[n] < 0.95 * pos);
        }
        let distinct: BTreeSet<_> = m.negative_ids.iter().collect();
        assert_eq!(distinct.len(), 6);
    }
    let (again, _) = mine_negatives(&teacher, &index, &data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_mined(&dir.path().join("a.jsonl"), &mined).unwrap();
    save_mined(&dir.path().join("b.jsonl"), &again).unwrap();
    assert_eq!(std::fs::read(dir.path().join("a.jsonl")).unwrap(), std::fs::read(dir.path().join("b.jsonl")).unwrap());
    let loaded = load_mined(&dir.path().join("a.jsonl")).unwrap();
    assert_eq!(loaded.iter().map(|m| &m.negative_ids).collect::<Vec<_>>(), mined.iter().map(|m| &m.negative_ids).collect::<Vec<_>>());
}

#[test]
fn lowering_the_margin_only_removes_high_scores() {
    let data = common::dataset(23, 30, 150);
    let (teacher, _) = common::embedder(&data, 80, 5);
    let (index, _) = run_indexing(&data, &teacher, 64).unwrap();
    let run = |perc: f64| {
        let cfg = MiningConfig { n_negatives: 5, perc_margin: perc, candidate_pool_k: 150, seed: 2 };
        mine_negatives(&teacher, &index, &data, &cfg).unwrap().0
    };
    let (hi, lo) = (run(0.98), run(0.85));
    for (h, l) in hi.iter().zip(&lo) {
        let pos = h.teacher_scores[&h.positive_id];
        let max_lo = l.negative_ids[..l.negative_ids.len() - l.n_backfilled].iter().map(|n| l.teacher_scores[n]).fold(f64::MIN, f64::max);
        assert!(max_lo < 0.85 * pos || l.negative_ids.len() == l.n_backfilled);
        let max_hi = h.negative_ids[..h.negative_ids.len() - h.n_backfilled].iter().map(|n| h.teacher_scores[n]).fold(f64::MIN, f64::max);
        assert!(max_lo <= max_hi || h.n_backfilled == h.negative_ids.len());
    }
}
