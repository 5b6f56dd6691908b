use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stagerank_core::eval::EvalReport;
use stagerank_core::experiment::{prepare, reranked_ndcg, AblationReport};
use stagerank_core::pipeline::{PipelineConfig, RetrievalRun, RunEntry, RunHeader, StageTimings};

fn stagerank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stagerank")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = stagerank(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
    "dataset": { "seed": 5, "n_queries": 24, "n_passages": 60 },
    "model": {
        "reranker": { "d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16, "max_seq_len": 24, "attention_mode": "bidirectional" },
        "embedder": { "d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16, "max_seq_len": 16, "attention_mode": "bidirectional" }
    },
    "training": {
        "reranker": { "loss": "infonce", "steps": 12, "batch_size": 2 },
        "embedder": { "d_embed": 8, "steps": 12, "batch_size": 4 }
    },
    "pipeline": { "retrieval": { "k_retrieve": 20, "final_k": 10 } },
    "perf": { "n_iters": 13, "n_passages": 640, "passage_tokens": 16 },
    "ablation": {
        "train_queries": 30,
        "train_passages": 40,
        "sizes": [{ "label": "tiny", "backbone": { "d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16, "max_seq_len": 24, "attention_mode": "bidirectional" } }],
        "attention": ["bidirectional"],
        "losses": ["infonce"],
        "seeds": [2]
    }
}"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.json");
        std::fs::write(&config, TINY).unwrap();
        Self { _dir: dir, root, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run(&self, out: &str, args: &[&str]) -> String {
        let out_dir = self.out(out);
        let mut full = vec!["--config", s(&self.config), "--out", s(&out_dir)];
        full.extend_from_slice(args);
        ok(&full)
    }

    /// Synthetic dataset, vocabulary and a briefly trained embedder.
    fn basics(&self) -> (PathBuf, PathBuf, PathBuf) {
        self.run("data", &["dataset", "synth"]);
        let data = self.out("data").join("dataset");
        self.run("vocab", &["vocab", "build", "--data", s(&data)]);
        let vocab = self.out("vocab").join("vocab.txt");
        self.run("emb", &["train", "embedder", "--data", s(&data), "--vocab", s(&vocab)]);
        (data, vocab, self.out("emb").join("embedder.ckpt"))
    }
}

#[test]
fn evaluate_reports_one_for_a_perfect_run() {
    let ws = Workspace::new();
    ws.run("data", &["dataset", "synth"]);
    let data = ws.out("data").join("dataset");
    let dataset = stagerank_core::corpus::Dataset::load(&data).unwrap();
    let entries = dataset
        .queries
        .iter()
        .map(|q| {
            let pos = dataset.qrels.relevant(&q.id).into_iter().next().unwrap().to_string();
            let other = dataset.passages.iter().find(|p| p.id != pos).unwrap().id.clone();
            RunEntry { query_id: q.id.clone(), ranked: vec![pos, other], scores: vec![2.0, 1.0], timings: StageTimings::default() }
        })
        .collect();
    let run = RetrievalRun {
        header: RunHeader { label: "oracle".into(), dataset: dataset.name.clone(), config: PipelineConfig::default() },
        entries,
    };
    let run_path = ws.root.join("oracle.jsonl");
    run.save(&run_path).unwrap();
    let stdout = ws.run("eval", &["evaluate", "--data", s(&data), "--run", s(&run_path)]);
    assert!(stdout.contains("oracle") && stdout.contains("1.0000"), "{stdout}");
    let report = EvalReport::from_json(&std::fs::read_to_string(ws.out("eval").join("report.json")).unwrap()).unwrap();
    assert_eq!(report.rows[0].avg, 1.0);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"training": {"reranker": {"lr": 0.1}}}"#).unwrap();
    let out = stagerank(&["--config", s(&cfg), "--out", s(&dir.path().join("o")), "dataset", "synth"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["kind"], "usage");
    assert!(err["error"].as_str().unwrap().contains("unknown field"), "{err}");
    assert!(!dir.path().join("o").exists(), "no output before validation passes");
}

#[test]
fn missing_inputs_and_runtime_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = stagerank(&["--out", s(&dir.path().join("o")), "dataset", "validate", "--data", "/nonexistent/data"]);
    assert_eq!(out.status.code(), Some(1));
    let bad = dir.path().join("bad");
    std::fs::create_dir_all(bad.join("qrels")).unwrap();
    std::fs::write(bad.join("corpus.jsonl"), "{\"_id\":\"d1\",\"text\":\"x\"}\n").unwrap();
    std::fs::write(bad.join("queries.jsonl"), "{\"_id\":\"q1\",\"text\":\"x\"}\n").unwrap();
    std::fs::write(bad.join("qrels/test.tsv"), "query-id\tcorpus-id\tscore\nq1\tmissing\t1\n").unwrap();
    let out = stagerank(&["--out", s(&dir.path().join("o")), "dataset", "validate", "--data", s(&bad)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["kind"], "runtime");
    let out = stagerank(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let ws = Workspace::new();
    ws.run("data", &["dataset", "synth"]);
    let corpus = ws.out("data").join("dataset").join("corpus.jsonl");
    let before = std::fs::read(&corpus).unwrap();
    let out = stagerank(&["--config", s(&ws.config), "--out", s(&ws.out("data")), "dataset", "synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    ok(&["--config", s(&ws.config), "--out", s(&ws.out("data")), "--force", "dataset", "synth"]);
    assert_eq!(std::fs::read(&corpus).unwrap(), before);
}

#[test]
fn snapshot_reproduces_the_run() {
    let ws = Workspace::new();
    let (data, vocab, ckpt) = ws.basics();
    let snapshot = ws.out("emb").join("config.train-embedder.json");
    let again = ws.out("emb2");
    ok(&["--config", s(&snapshot), "--out", s(&again), "train", "embedder", "--data", s(&data), "--vocab", s(&vocab)]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(again.join("embedder.ckpt")).unwrap());
    assert_eq!(std::fs::read(&snapshot).unwrap(), std::fs::read(again.join("config.train-embedder.json")).unwrap());
}

#[test]
fn seed_flag_overrides_the_config() {
    let ws = Workspace::new();
    ws.run("a", &["--seed", "9", "dataset", "synth"]);
    let snap: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.out("a").join("config.dataset-synth.json")).unwrap()).unwrap();
    assert_eq!(snap["dataset"]["seed"], 9);
    assert_eq!(snap["training"]["reranker"]["seed"], 9);
    ws.run("b", &["dataset", "synth"]);
    let read = |d: &str| std::fs::read(ws.out(d).join("dataset").join("queries.jsonl")).unwrap();
    assert_ne!(read("a"), read("b"));
}

#[test]
fn full_pipeline_through_the_cli() {
    let ws = Workspace::new();
    let (data, vocab, emb) = ws.basics();
    let model = ["--data", s(&data), "--vocab", s(&vocab), "--embedder", s(&emb)];
    ws.run("mine", &[&["mine"], &model[..]].concat());
    let mined = ws.out("mine").join("mined.jsonl");
    assert_eq!(stagerank_core::mining::load_mined(&mined).unwrap().len(), 24);
    ws.run("rr", &["train", "reranker", "--data", s(&data), "--vocab", s(&vocab), "--mined", s(&mined)]);
    let rr = ws.out("rr").join("reranker.ckpt");
    ws.run("idx", &[&["index"], &model[..]].concat());
    let index = ws.out("idx").join("index.srix");
    let stdout = ws.run("q", &[&["query"], &model[..], &["--index", s(&index), "--reranker", s(&rr), "--text", "hello"]].concat());
    let result: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(result["ranked"].as_array().unwrap().len(), 10);

    // Starting from the trained reranker with pruning keeps the bottom layer only.
    let pruned_cfg = ws.root.join("pruned.json");
    let mut cfg: serde_json::Value = serde_json::from_str(TINY).unwrap();
    cfg["model"]["prune_k"] = 1.into();
    std::fs::write(&pruned_cfg, cfg.to_string()).unwrap();
    ok(&[
        "--config", s(&pruned_cfg), "--out", s(&ws.out("rr2")), "train", "reranker", "--data", s(&data), "--vocab",
        s(&vocab), "--mined", s(&mined), "--init", s(&rr),
    ]);
    assert!(ws.out("rr2").join("reranker.ckpt").exists());

    let pruned = ws.root.join("pruned.ckpt");
    std::fs::copy(ws.out("rr2").join("reranker.ckpt"), &pruned).unwrap();
    let stdout = ws.run(
        "bench",
        &["benchmark", "--data", s(&data), "--vocab", s(&vocab), "--embedder", s(&emb), "--reranker", s(&rr), "--reranker", s(&pruned)],
    );
    let report = EvalReport::from_json(&std::fs::read_to_string(ws.out("bench").join("report.json")).unwrap()).unwrap();
    let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["embedder", "embedder + reranker", "embedder + pruned"]);
    assert!(stdout.lines().nth(1).unwrap().starts_with("embedder "), "{stdout}");
    assert!(ws.out("bench").join("runs").join("dataset").join("embedder.jsonl").exists());

    let run = ws.out("bench").join("runs").join("dataset").join("embedder.jsonl");
    let stdout = ws.run("eval", &["evaluate", "--data", s(&data), "--run", s(&run)]);
    assert!(stdout.contains(&format!("{:.4}", report.rows[0].avg)), "{stdout}");

    let stdout = ws.run("prof", &["profile", "--vocab", s(&vocab), "--embedder", s(&emb), "--large-embedder", s(&emb), "--reranker", s(&rr)]);
    assert!(stdout.contains("indexing time ratio"), "{stdout}");
}

#[test]
fn single_cell_ablation_is_one_train_and_evaluate() {
    let ws = Workspace::new();
    let stdout = ws.run("abl", &["ablate"]);
    let report: AblationReport = serde_json::from_slice(&std::fs::read(ws.out("abl").join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert!(stdout.contains("tiny"));

    let cfg: serde_json::Value = serde_json::from_str(TINY).unwrap();
    let run_cfg = serde_json::from_value::<RunConfigView>(cfg).unwrap();
    let exp = run_cfg.experiment();
    let prepared = prepare(&exp, 2).unwrap();
    let (ndcg, _) = reranked_ndcg(&prepared, &exp.reranker, &exp.reranker_training, &exp.pipeline).unwrap();
    assert_eq!(report.rows[0].per_seed, vec![ndcg]);
    assert_eq!(report.retriever_per_seed, vec![prepared.retriever_ndcg]);
}

/// The subset of the run config that shapes an ablation, mirrored here so the
/// oracle does not go through the binary.
#[derive(serde::Deserialize)]
struct RunConfigView {
    dataset: DatasetView,
    model: ModelView,
    training: TrainingView,
    pipeline: PipelineView,
    ablation: AblationView,
}

#[derive(serde::Deserialize)]
struct DatasetView {
    n_queries: usize,
    n_passages: usize,
}

#[derive(serde::Deserialize)]
struct ModelView {
    embedder: stagerank_core::experiment::BackboneSpec,
}

#[derive(serde::Deserialize)]
struct TrainingView {
    reranker: stagerank_core::train::RerankerTrainConfig,
    embedder: stagerank_core::biencoder::BiencoderTrainConfig,
}

#[derive(serde::Deserialize)]
struct PipelineView {
    retrieval: PipelineConfig,
}

#[derive(serde::Deserialize)]
struct AblationView {
    train_queries: usize,
    train_passages: usize,
    sizes: Vec<stagerank_core::experiment::SizeSpec>,
}

impl RunConfigView {
    fn experiment(&self) -> stagerank_core::experiment::ExperimentConfig {
        stagerank_core::experiment::ExperimentConfig {
            train_queries: self.ablation.train_queries,
            train_passages: self.ablation.train_passages,
            test_queries: self.dataset.n_queries,
            test_passages: self.dataset.n_passages,
            embedder: self.model.embedder.clone(),
            embedder_training: self.training.embedder.clone(),
            reranker: self.ablation.sizes[0].backbone.clone(),
            reranker_training: self.training.reranker.clone(),
            pipeline: self.pipeline.retrieval.clone(),
            ..Default::default()
        }
    }
}
