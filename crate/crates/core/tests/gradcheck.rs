//! Central finite differences against the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stagerank_core::crossencoder::RerankerModel;
use stagerank_core::losses::{batch_loss, Example, ListExample, PairExample, Temperature};
use stagerank_core::tokenizer::{TokenSeq, Vocab, BOS, PAD};
use stagerank_core::xformer::{backward, AttentionMode, Backbone, ModelConfig, Pooling};

const STEP: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero gradients from dividing by noise.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn random_config(rng: &mut ChaCha8Rng, seed: u64) -> ModelConfig {
    let n_heads = [1, 2, 4][rng.random_range(0..3)];
    let d_model = n_heads * rng.random_range(1..=16 / n_heads).max(2 / n_heads.min(2));
    ModelConfig {
        vocab_size: rng.random_range(6..14),
        d_model,
        n_heads,
        n_layers: rng.random_range(1..=3),
        d_ff: rng.random_range(2..=20),
        max_seq_len: 8,
        attention_mode: if rng.random_bool(0.5) { AttentionMode::Causal } else { AttentionMode::Bidirectional },
        pooling: Pooling::Mean,
        seed,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> TokenSeq {
    let len = rng.random_range(2..=cfg.max_seq_len);
    let kept = rng.random_range(1..=len);
    let ids: Vec<u32> = (0..len)
        .map(|i| if i == 0 { BOS } else if i < kept { rng.random_range(4..cfg.vocab_size as u32) } else { PAD })
        .collect();
    TokenSeq { keep: ids.iter().map(|&i| i != PAD).collect(), ids }
}

/// Max relative error over every scalar parameter of `tensors`.
fn max_fd_error<M>(model: &mut M, analytic: &[Vec<f64>], tensors: fn(&mut M) -> Vec<&mut [f64]>, f: impl Fn(&M) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let n_tensors = analytic.len();
    for t in 0..n_tensors {
        for j in 0..analytic[t].len() {
            let orig = tensors(model)[t][j];
            tensors(model)[t][j] = orig + STEP;
            let up = f(model);
            tensors(model)[t][j] = orig - STEP;
            let down = f(model);
            tensors(model)[t][j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[t][j], numeric));
        }
    }
    worst
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for seed in 0..20 {
        let cfg = random_config(&mut rng, seed);
        let mut bb = Backbone::<f64>::new(cfg.clone()).unwrap();
        let tokens = random_tokens(&mut rng, &cfg);
        let upstream: Vec<f64> = (0..cfg.d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = bb.forward(&tokens, true).unwrap();
        let grads = backward(out.trace.as_ref(), &bb.params, &bb.config, &upstream).unwrap();
        let analytic: Vec<Vec<f64>> = grads.named_tensors().into_iter().map(|t| t.2.to_vec()).collect();
        let objective = |b: &Backbone<f64>| {
            let o = b.forward(&tokens, false).unwrap();
            o.pooled.iter().zip(&upstream).map(|(p, u)| p * u).sum::<f64>()
        };
        let err = max_fd_error(&mut bb, &analytic, |b| b.params.tensors_mut(), objective);
        assert!(err < 1e-4, "seed {seed} {cfg:?}: max relative error {err:e}");
    }
}

fn words(vocab_size: usize) -> Vec<String> {
    (0..vocab_size - 4).map(|i| format!("w{i}")).collect()
}

fn sentence(rng: &mut ChaCha8Rng, words: &[String], n: usize) -> String {
    (0..n).map(|_| words[rng.random_range(0..words.len())].clone()).collect::<Vec<_>>().join(" ")
}

#[test]
fn reranker_objectives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..20 {
        let cfg = random_config(&mut rng, 100 + seed);
        let w = words(cfg.vocab_size);
        let vocab = Vocab::build(w.iter().map(String::as_str), cfg.vocab_size).unwrap();
        let mut model = RerankerModel::<f64>::new(cfg).unwrap();
        model.head_weight.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        model.head_bias = 0.1;
        let tau = Temperature::new(rng.random_range(0.3..2.0)).unwrap();
        let pair_batch: Vec<Example> = (0..2)
            .map(|i| {
                Example::Pair(PairExample {
                    query: sentence(&mut rng, &w, 2),
                    passage: sentence(&mut rng, &w, 3),
                    label: i == 0,
                })
            })
            .collect();
        let list_batch: Vec<Example> = (0..2)
            .map(|_| {
                Example::List(ListExample {
                    query: sentence(&mut rng, &w, 2),
                    positive: "w0 w1".into(),
                    negatives: vec![sentence(&mut rng, &w, 2) + " w2", sentence(&mut rng, &w, 3) + " w3"],
                })
            })
            .collect();
        for batch in [&pair_batch, &list_batch] {
            let (_, grads) = batch_loss(&model, &vocab, batch, tau).unwrap();
            let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(<[f64]>::to_vec).collect();
            let err = max_fd_error(&mut model, &analytic, |m| m.tensors_mut(), |m| {
                batch_loss(m, &vocab, batch, tau).unwrap().0
            });
            assert!(err < 1e-4, "seed {seed}: max relative error {err:e}");
        }
    }
}

#[test]
fn duplicated_batch_keeps_mean_loss() {
    let cfg = ModelConfig {
        vocab_size: 10,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 8,
        max_seq_len: 8,
        attention_mode: AttentionMode::Bidirectional,
        pooling: Pooling::Mean,
        seed: 5,
    };
    let w = words(10);
    let vocab = Vocab::build(w.iter().map(String::as_str), 10).unwrap();
    let mut model = RerankerModel::<f64>::new(cfg).unwrap();
    let tau = Temperature::new(0.05).unwrap();
    let list = Example::List(ListExample {
        query: "w0 w1".into(),
        positive: "w2".into(),
        negatives: vec!["w3".into(), "w4".into(), "w5 w0".into(), "w1".into()],
    });
    // Zero head: every logit equals the bias, so the loss is ln(N + 1).
    let (l, _) = batch_loss(&model, &vocab, std::slice::from_ref(&list), tau).unwrap();
    assert!((l - 5.0_f64.ln()).abs() < 1e-12);

    model.head_weight = (0..8).map(|i| i as f64 / 8.0 - 0.4).collect();
    let pair = Example::Pair(PairExample { query: "w0".into(), passage: "w1 w2".into(), label: true });
    assert!(batch_loss(&model, &vocab, &[pair.clone(), list.clone()], tau).is_err());
    assert!(batch_loss(&model, &vocab, &[], tau).is_err());

    let batch = vec![list.clone(), Example::List(ListExample {
        query: "w3".into(),
        positive: "w4 w5".into(),
        negatives: vec!["w0".into()],
    })];
    let doubled: Vec<Example> = batch.iter().chain(batch.iter()).cloned().collect();
    let (a, ga) = batch_loss(&model, &vocab, &batch, tau).unwrap();
    let (b, gb) = batch_loss(&model, &vocab, &doubled, tau).unwrap();
    assert!((a - b).abs() < 1e-12);
    for (x, y) in ga.tensors().iter().zip(gb.tensors()) {
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
