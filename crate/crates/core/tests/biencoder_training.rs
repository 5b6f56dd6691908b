//! Contrastive bi-encoder training on synthetic data.

mod common;

use stagerank_core::biencoder::{train_biencoder, BiencoderTrainConfig, Embedder, TextRole};
use stagerank_core::mining::{mine_negatives, MiningConfig};
use stagerank_core::pipeline::run_indexing;

fn cos(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y) as f64).sum()
}

#[test]
fn training_separates_positives_from_random_passages() {
    let train = common::dataset(41, 800, 800);
    let test = common::dataset(42, 60, 300);
    let (emb, log) = common::embedder(&train, 300, 1);
    assert!(log.tail_mean(20).unwrap() < log.losses[0]);
    let passages = test.passage_index();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, q) in test.queries.iter().enumerate() {
        let qv = &emb.embed_texts(&[q.text.as_str()], TextRole::Query).unwrap()[0];
        let relevant = test.qrels.relevant(&q.id);
        for &p in &relevant {
            pos.push(cos(qv, &emb.embed_texts(&[passages[p].full_text().as_str()], TextRole::Passage).unwrap()[0]));
        }
        let other = &test.passages[(i * 37) % test.passages.len()];
        if !relevant.contains(other.id.as_str()) {
            neg.push(cos(qv, &emb.embed_texts(&[other.full_text().as_str()], TextRole::Passage).unwrap()[0]));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = mean(&pos) - mean(&neg);
    assert!(gap > 0.1, "cosine gap {gap:.3}");
}

#[test]
fn zero_projection_starts_at_uniform_loss() {
    let train = common::dataset(43, 40, 2000);
    let (teacher, _) = common::embedder(&train, 30, 2);
    let (index, _) = run_indexing(&train, &teacher, 64).unwrap();
    let (mined, _) = mine_negatives(&teacher, &index, &train, &MiningConfig { n_negatives: 2, seed: 3, ..Default::default() }).unwrap();
    let vocab = common::vocab();
    let (b, n) = (8, 2);
    let cfg = BiencoderTrainConfig { d_embed: 16, steps: 1, batch_size: b, n_hard: n, zero_projection: true, seed: 4, ..Default::default() };
    let (_, log) =
        train_biencoder::<f64>(&train, Some(&mined), &vocab, common::small_backbone().model_config(vocab.size(), 4), &cfg).unwrap();
    let expected = ((b * (1 + n)) as f64).ln();
    assert!((log.losses[0] - expected).abs() < 1e-9, "{} vs {expected}", log.losses[0]);
}

#[test]
fn training_is_seed_deterministic() {
    let train = common::dataset(44, 200, 200);
    let (a, la) = common::embedder(&train, 20, 9);
    let (b, lb) = common::embedder(&train, 20, 9);
    assert_eq!(la, lb);
    assert_eq!(a.fingerprint(), b.fingerprint());
    let (c, _) = common::embedder(&train, 20, 10);
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn embeddings_do_not_depend_on_batch_company() {
    let train = common::dataset(45, 100, 100);
    let (emb, _) = common::embedder(&train, 10, 1);
    let texts: Vec<String> = train.passages.iter().take(20).map(|p| p.full_text()).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let together = emb.embed_texts(&refs, TextRole::Passage).unwrap();
    for (t, v) in refs.iter().zip(&together) {
        assert_eq!(&emb.embed_texts(&[t], TextRole::Passage).unwrap()[0], v);
    }
}
