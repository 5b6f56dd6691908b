use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use indexmap::IndexMap;
use serde::Serialize;
use stagerank_core::biencoder::{train_biencoder, Embedder, EmbedderModel, LocalEmbedder};
use stagerank_core::checkpoint::Checkpoint;
use stagerank_core::corpus::{make_synthetic_dataset_with, synthetic_word_list, Dataset};
use stagerank_core::crossencoder::{LocalReranker, Reranker, RerankerModel};
use stagerank_core::eval::{evaluate_run, render_report, EvalReport, ReportRow};
use stagerank_core::experiment::run_ablation;
use stagerank_core::index::VectorIndex;
use stagerank_core::mining::{load_mined, mine_negatives, save_mined};
use stagerank_core::perf::{
    compare_pipelines, profile_indexing_with, profile_query_embedding, profile_rerank, PipelineProfile, RerankShape,
    QUERY_TOKENS,
};
use stagerank_core::pipeline::{run_benchmark, run_indexing, PassageTexts, QueryPipeline, RetrievalRun};
use stagerank_core::tokenizer::Vocab;
use stagerank_core::train::{build_list_examples, continue_training, train_reranker};
use stagerank_serve::{load_state, serve, RemoteEmbedder};

use crate::config::RunConfig;
use crate::{Cli, Command, DatasetCmd, ModelArgs, TrainCmd, VocabCmd};

#[derive(Clone, Copy, Debug)]
pub enum FailKind {
    Usage,
    Runtime,
}

impl FailKind {
    pub fn code(self) -> u8 {
        match self {
            FailKind::Usage => 1,
            FailKind::Runtime => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FailKind::Usage => "usage",
            FailKind::Runtime => "runtime",
        }
    }
}

pub struct Failure {
    pub kind: FailKind,
    pub error: anyhow::Error,
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

trait Classify<T> {
    fn usage(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn usage(self) -> Outcome<T> {
        self.map_err(|e| Failure { kind: FailKind::Usage, error: e.into() })
    }
    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure { kind: FailKind::Runtime, error: e.into() })
    }
}

fn usage_err<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure { kind: FailKind::Usage, error: anyhow!(msg.into()) })
}

/// Output directory plus the overwrite policy.
struct Outputs {
    dir: PathBuf,
    force: bool,
}

impl Outputs {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Refuses to start when any planned output exists and `--force` was not given.
    fn claim(&self, names: &[&str]) -> Outcome {
        if !self.force {
            if let Some(existing) = names.iter().map(|n| self.path(n)).find(|p| p.exists()) {
                return usage_err(format!("{} already exists; pass --force to overwrite", existing.display()));
            }
        }
        std::fs::create_dir_all(&self.dir)
            .with_context(|| format!("creating {}", self.dir.display()))
            .runtime()
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Outcome {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value).context("serializing output").runtime()?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display())).runtime()
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Dataset(DatasetCmd::Synth) => "dataset-synth",
        Command::Dataset(DatasetCmd::Validate { .. }) => "dataset-validate",
        Command::Vocab(_) => "vocab-build",
        Command::Train(TrainCmd::Reranker { .. }) => "train-reranker",
        Command::Train(TrainCmd::Embedder { .. }) => "train-embedder",
        Command::Mine(_) => "mine",
        Command::Index(_) => "index",
        Command::Query(_) => "query",
        Command::Evaluate(_) => "evaluate",
        Command::Benchmark(_) => "benchmark",
        Command::Ablate => "ablate",
        Command::Profile(_) => "profile",
        Command::Serve(_) => "serve",
    }
}

pub fn run(cli: Cli) -> Outcome {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).usage()?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Command::Serve(args) = &cli.command {
        if let Some(port) = args.port {
            cfg.serve.port = port;
        }
    }
    cfg.validate().usage()?;
    check_inputs(&cli.command)?;

    let name = command_name(&cli.command);
    let out = Outputs { dir: cli.out.clone().unwrap_or_else(|| PathBuf::from("out")), force: cli.force };
    let snapshot = format!("config.{name}.json");
    let mut planned = vec![snapshot.as_str()];
    planned.extend(planned_outputs(&cli.command));
    out.claim(&planned)?;
    out.write_json(&snapshot, &cfg)?;

    match cli.command {
        Command::Dataset(DatasetCmd::Synth) => dataset_synth(&cfg, &out),
        Command::Dataset(DatasetCmd::Validate { data }) => dataset_validate(&data),
        Command::Vocab(VocabCmd::Build { data }) => vocab_build(&cfg, &out, &data),
        Command::Train(TrainCmd::Reranker { data, vocab, mined, init }) => {
            train_reranker_cmd(&cfg, &out, &data, &vocab, &mined, init.as_deref())
        }
        Command::Train(TrainCmd::Embedder { data, vocab, mined }) => {
            train_embedder_cmd(&cfg, &out, &data, &vocab, mined.as_deref())
        }
        Command::Mine(args) => mine(&cfg, &out, &args),
        Command::Index(args) => index(&cfg, &out, &args),
        Command::Query(args) => query(&cfg, &out, &args),
        Command::Evaluate(args) => evaluate(&cfg, &out, &args.data, &args.run),
        Command::Benchmark(args) => benchmark(&cfg, &out, &args),
        Command::Ablate => ablate(&cfg, &out),
        Command::Profile(args) => profile(&cfg, &out, &args),
        Command::Serve(_) => serve_cmd(&cfg),
    }
}

fn planned_outputs(cmd: &Command) -> Vec<&'static str> {
    match cmd {
        Command::Dataset(DatasetCmd::Synth) => vec!["dataset"],
        Command::Dataset(DatasetCmd::Validate { .. }) => vec![],
        Command::Vocab(_) => vec!["vocab.txt"],
        Command::Train(TrainCmd::Reranker { .. }) => vec!["reranker.ckpt", "reranker.log.json"],
        Command::Train(TrainCmd::Embedder { .. }) => vec!["embedder.ckpt", "embedder.log.json"],
        Command::Mine(_) => vec!["mined.jsonl"],
        Command::Index(_) => vec!["index.srix"],
        Command::Query(_) => vec!["query.json"],
        Command::Evaluate(_) => vec!["report.json"],
        Command::Benchmark(_) => vec!["report.json", "runs"],
        Command::Ablate => vec!["ablation.json"],
        Command::Profile(_) => vec!["profile.json"],
        Command::Serve(_) => vec![],
    }
}

/// Missing inputs are reported before anything long-running starts.
fn check_inputs(cmd: &Command) -> Outcome {
    let mut paths: Vec<&Path> = Vec::new();
    match cmd {
        Command::Dataset(DatasetCmd::Validate { data }) => paths.push(data),
        Command::Vocab(VocabCmd::Build { data }) => paths.extend(data.iter().map(PathBuf::as_path)),
        Command::Train(TrainCmd::Reranker { data, vocab, mined, init }) => {
            paths.extend([data.as_path(), vocab, mined]);
            paths.extend(init.as_deref());
        }
        Command::Train(TrainCmd::Embedder { data, vocab, mined }) => {
            paths.extend([data.as_path(), vocab]);
            paths.extend(mined.as_deref());
        }
        Command::Mine(m) | Command::Index(m) => model_paths(m, &mut paths),
        Command::Query(q) => {
            model_paths(&q.model, &mut paths);
            paths.push(&q.index);
            paths.extend(q.reranker.as_deref());
        }
        Command::Evaluate(e) => {
            paths.push(&e.data);
            paths.extend(e.run.iter().map(PathBuf::as_path));
        }
        Command::Benchmark(b) => {
            paths.extend(b.data.iter().map(PathBuf::as_path));
            paths.extend(b.vocab.as_deref());
            paths.extend(b.embedder.iter().chain(&b.reranker).map(PathBuf::as_path));
        }
        Command::Profile(p) => {
            paths.extend([p.vocab.as_path(), &p.embedder]);
            paths.extend(p.large_embedder.as_deref().into_iter().chain(p.reranker.as_deref()));
        }
        Command::Dataset(DatasetCmd::Synth) | Command::Ablate | Command::Serve(_) => {}
    }
    match paths.into_iter().find(|p| !p.exists()) {
        Some(missing) => usage_err(format!("input {} does not exist", missing.display())),
        None => Ok(()),
    }
}

fn model_paths<'a>(m: &'a ModelArgs, paths: &mut Vec<&'a Path>) {
    paths.push(&m.data);
    paths.extend(m.vocab.as_deref().into_iter().chain(m.embedder.as_deref()));
}

fn load_dataset(dir: &Path) -> Outcome<Dataset> {
    let dataset = Dataset::load(dir).usage()?;
    dataset.validate().usage()?;
    Ok(dataset)
}

fn load_vocab(path: &Path) -> Outcome<Vocab> {
    Vocab::load(path).usage()
}

fn load_local_embedder(checkpoint: &Path, vocab: &Vocab) -> Outcome<LocalEmbedder<f64>> {
    let model = EmbedderModel::<f64>::from_checkpoint(&Checkpoint::load(checkpoint).usage()?).usage()?;
    Ok(LocalEmbedder::new(model, vocab.clone()))
}

fn load_local_reranker(checkpoint: &Path, vocab: &Vocab) -> Outcome<LocalReranker<f64>> {
    let model = RerankerModel::<f64>::from_checkpoint(&Checkpoint::load(checkpoint).usage()?).usage()?;
    Ok(LocalReranker::new(model, vocab.clone()))
}

/// A local checkpoint when given, otherwise the configured remote endpoint.
fn resolve_embedder(cfg: &RunConfig, args: &ModelArgs) -> Outcome<Box<dyn Embedder>> {
    match (&args.embedder, &cfg.pipeline.remote_embedder) {
        (Some(path), _) => {
            let Some(vocab) = &args.vocab else { return usage_err("--vocab is required with a local --embedder") };
            Ok(Box::new(load_local_embedder(path, &load_vocab(vocab)?)?))
        }
        (None, Some(remote)) => Ok(Box::new(RemoteEmbedder::new(remote.clone()).usage()?)),
        (None, None) => usage_err("pass --embedder or configure pipeline.remote_embedder"),
    }
}

fn dataset_synth(cfg: &RunConfig, out: &Outputs) -> Outcome {
    let d = &cfg.dataset;
    let words = synthetic_word_list(d.n_words);
    let mut dataset = make_synthetic_dataset_with(d.seed, d.n_queries, d.n_passages, &words, &d.generator).runtime()?;
    dataset.name = "dataset".into();
    dataset.save(&out.path("dataset")).runtime()?;
    println!("{}", dataset_stats(&dataset));
    Ok(())
}

fn dataset_stats(d: &Dataset) -> serde_json::Value {
    serde_json::json!({
        "name": d.name,
        "passages": d.passages.len(),
        "queries": d.queries.len(),
        "judgments": d.qrels.len(),
    })
}

fn dataset_validate(dir: &Path) -> Outcome {
    let dataset = Dataset::load(dir).runtime()?;
    dataset.validate().runtime()?;
    println!("{}", dataset_stats(&dataset));
    Ok(())
}

fn vocab_build(cfg: &RunConfig, out: &Outputs, dirs: &[PathBuf]) -> Outcome {
    let datasets = dirs.iter().map(|d| load_dataset(d)).collect::<Outcome<Vec<_>>>()?;
    let texts: Vec<String> = datasets
        .iter()
        .flat_map(|d| d.queries.iter().map(|q| q.text.clone()).chain(d.passages.iter().map(|p| p.full_text())))
        .collect();
    let vocab = Vocab::build(texts.iter().map(String::as_str), cfg.tokenizer.max_size).runtime()?;
    vocab.save(&out.path("vocab.txt")).runtime()?;
    println!("{}", serde_json::json!({ "vocab_size": vocab.size() }));
    Ok(())
}

fn train_reranker_cmd(cfg: &RunConfig, out: &Outputs, data: &Path, vocab: &Path, mined: &Path, init: Option<&Path>) -> Outcome {
    let dataset = load_dataset(data)?;
    let vocab = load_vocab(vocab)?;
    let mined = load_mined(mined).usage()?;
    let tc = &cfg.training.reranker;
    let lists = build_list_examples(&dataset, &mined, tc.n_negatives, tc.random_negatives, tc.seed).usage()?;
    let (model, log) = match init {
        Some(path) => {
            let mut model = RerankerModel::<f64>::from_checkpoint(&Checkpoint::load(path).usage()?).usage()?;
            if let Some(k) = cfg.model.prune_k {
                model = model.prune(k).usage()?;
            }
            continue_training(model, &lists, &vocab, tc).runtime()?
        }
        None => {
            let mc = cfg.model.reranker.model_config(vocab.size(), tc.seed);
            train_reranker::<f64>(&lists, &vocab, mc, tc).runtime()?
        }
    };
    model.to_checkpoint().save(&out.path("reranker.ckpt")).runtime()?;
    out.write_json("reranker.log.json", &log)?;
    println!("{}", serde_json::json!({ "steps": log.losses.len(), "final_loss": log.tail_mean(50) }));
    Ok(())
}

fn train_embedder_cmd(cfg: &RunConfig, out: &Outputs, data: &Path, vocab: &Path, mined: Option<&Path>) -> Outcome {
    let dataset = load_dataset(data)?;
    let vocab = load_vocab(vocab)?;
    let mined = mined.map(load_mined).transpose().usage()?;
    let tc = &cfg.training.embedder;
    let mc = cfg.model.embedder.model_config(vocab.size(), tc.seed);
    let (model, log) = train_biencoder::<f64>(&dataset, mined.as_deref(), &vocab, mc, tc).runtime()?;
    model.to_checkpoint().save(&out.path("embedder.ckpt")).runtime()?;
    out.write_json("embedder.log.json", &log)?;
    println!("{}", serde_json::json!({ "steps": log.losses.len(), "final_loss": log.tail_mean(50) }));
    Ok(())
}

fn mine(cfg: &RunConfig, out: &Outputs, args: &ModelArgs) -> Outcome {
    let dataset = load_dataset(&args.data)?;
    let teacher = resolve_embedder(cfg, args)?;
    let (index, _) = run_indexing(&dataset, teacher.as_ref(), cfg.pipeline.retrieval.embed_batch_size).runtime()?;
    let (mined, stats) = mine_negatives(teacher.as_ref(), &index, &dataset, &cfg.mining).runtime()?;
    save_mined(&out.path("mined.jsonl"), &mined).runtime()?;
    println!("{}", serde_json::json!({ "examples": mined.len(), "stats": stats }));
    Ok(())
}

fn index(cfg: &RunConfig, out: &Outputs, args: &ModelArgs) -> Outcome {
    let dataset = load_dataset(&args.data)?;
    let embedder = resolve_embedder(cfg, args)?;
    let (mut index, stats) = run_indexing(&dataset, embedder.as_ref(), cfg.pipeline.retrieval.embed_batch_size).runtime()?;
    if let Some(n_lists) = cfg.pipeline.ann_lists {
        index.build_clusters(n_lists, cfg.dataset.seed).runtime()?;
    }
    index.save(&out.path("index.srix")).runtime()?;
    println!("{}", serde_json::to_string(&stats).unwrap_or_default());
    Ok(())
}

fn query(cfg: &RunConfig, out: &Outputs, args: &crate::QueryArgs) -> Outcome {
    let dataset = load_dataset(&args.model.data)?;
    let embedder = resolve_embedder(cfg, &args.model)?;
    let index = VectorIndex::load(&args.index).usage()?;
    let reranker = match &args.reranker {
        Some(path) => {
            let Some(vocab) = &args.model.vocab else { return usage_err("--vocab is required with --reranker") };
            Some(load_local_reranker(path, &load_vocab(vocab)?)?)
        }
        None => None,
    };
    let texts = PassageTexts::new(&dataset);
    let pipeline = QueryPipeline::new(
        &index,
        embedder.as_ref(),
        reranker.as_ref().map(|r| r as &dyn Reranker),
        &texts,
        cfg.pipeline.retrieval.clone(),
    )
    .usage()?;
    let (ranked, timings) = pipeline.run_query(&args.text).runtime()?;
    let result = serde_json::json!({
        "query": args.text,
        "ranked": ranked.iter().map(|(id, s)| serde_json::json!({ "id": id, "score": s })).collect::<Vec<_>>(),
        "timings": timings,
    });
    out.write_json("query.json", &result)?;
    println!("{}", serde_json::to_string_pretty(&result).unwrap_or_default());
    Ok(())
}

fn evaluate(cfg: &RunConfig, out: &Outputs, data: &Path, runs: &[PathBuf]) -> Outcome {
    let dataset = load_dataset(data)?;
    let mut report = EvalReport::new(vec![dataset.name.clone()], cfg.eval.k);
    for path in runs {
        let run = RetrievalRun::load(path).usage()?;
        let eval = evaluate_run(&run, &dataset.qrels, cfg.eval.k).runtime()?;
        let mut per = IndexMap::new();
        per.insert(dataset.name.clone(), eval.mean);
        report.rows.push(ReportRow::new(run.header.label.clone(), per));
    }
    std::fs::write(out.path("report.json"), report.to_json()).context("writing report").runtime()?;
    print!("{}", render_report(&report));
    Ok(())
}

fn label_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn file_safe(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn benchmark(cfg: &RunConfig, out: &Outputs, args: &crate::BenchmarkArgs) -> Outcome {
    let datasets = args.data.iter().map(|d| load_dataset(d)).collect::<Outcome<Vec<_>>>()?;
    let vocab = args.vocab.as_deref().map(load_vocab).transpose()?;
    if vocab.is_none() && !(args.embedder.is_empty() && args.reranker.is_empty()) {
        return usage_err("--vocab is required with local checkpoints");
    }
    let mut embedders: Vec<(String, Box<dyn Embedder>)> = Vec::new();
    for path in &args.embedder {
        embedders.push((label_of(path), Box::new(load_local_embedder(path, vocab.as_ref().expect("checked"))?)));
    }
    if let Some(remote) = &cfg.pipeline.remote_embedder {
        let label = if remote.model_name.is_empty() { "remote".to_string() } else { remote.model_name.clone() };
        embedders.push((label, Box::new(RemoteEmbedder::new(remote.clone()).usage()?)));
    }
    if embedders.is_empty() {
        return usage_err("benchmark needs at least one --embedder or pipeline.remote_embedder");
    }
    let mut rerankers: Vec<(String, LocalReranker<f64>)> = Vec::new();
    for path in &args.reranker {
        rerankers.push((label_of(path), load_local_reranker(path, vocab.as_ref().expect("checked"))?));
    }
    let mut labels: Vec<&str> = embedders.iter().map(|(l, _)| l.as_str()).chain(rerankers.iter().map(|(l, _)| l.as_str())).collect();
    labels.sort_unstable();
    if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
        return usage_err(format!("two models share the label `{}`; rename one checkpoint file", w[0]));
    }
    let emb_refs: Vec<(&str, &dyn Embedder)> = embedders.iter().map(|(l, e)| (l.as_str(), e.as_ref())).collect();
    let rr_refs: Vec<(&str, &dyn Reranker)> = rerankers.iter().map(|(l, r)| (l.as_str(), r as &dyn Reranker)).collect();

    let names: Vec<String> = datasets.iter().map(|d| d.name.clone()).collect();
    let mut report = EvalReport::new(names, cfg.eval.k);
    let mut table: IndexMap<String, IndexMap<String, f64>> = IndexMap::new();
    let mut failures = Vec::new();
    for dataset in &datasets {
        let outcome = run_benchmark(dataset, &emb_refs, &rr_refs, &cfg.pipeline.retrieval);
        let run_dir = out.path("runs").join(file_safe(&dataset.name));
        std::fs::create_dir_all(&run_dir).context("creating run directory").runtime()?;
        for row in outcome.rows {
            match row.run {
                Ok(run) => {
                    run.save(&run_dir.join(format!("{}.jsonl", file_safe(&row.label)))).runtime()?;
                    let score = evaluate_run(&run, &dataset.qrels, cfg.eval.k).runtime()?.mean;
                    table.entry(row.label).or_default().insert(dataset.name.clone(), score);
                }
                Err(e) => failures.push(format!("{} on {}: {e}", row.label, dataset.name)),
            }
        }
    }
    report.rows = table.into_iter().map(|(label, per)| ReportRow::new(label, per)).collect();
    std::fs::write(out.path("report.json"), report.to_json()).context("writing report").runtime()?;
    print!("{}", render_report(&report));
    if !failures.is_empty() {
        return Err(Failure { kind: FailKind::Runtime, error: anyhow!("some pipelines failed: {}", failures.join("; ")) });
    }
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Outputs) -> Outcome {
    let grid = cfg.grid();
    if grid.sizes.is_empty() || grid.attention.is_empty() || grid.losses.is_empty() || grid.seeds.is_empty() {
        return usage_err("ablation grid has an empty axis");
    }
    let report = run_ablation(&cfg.experiment(), &grid).runtime()?;
    out.write_json("ablation.json", &report)?;
    print!("{}", report.render());
    Ok(())
}

fn profile(cfg: &RunConfig, out: &Outputs, args: &crate::ProfileArgs) -> Outcome {
    let vocab = load_vocab(&args.vocab)?;
    let words = synthetic_word_list(cfg.dataset.n_words);
    let p = &cfg.perf;
    let seed = cfg.dataset.seed;
    let reranker = args.reranker.as_deref().map(|r| load_local_reranker(r, &vocab)).transpose()?;
    let measure = |label: String, embedder: &dyn Embedder, reranker: Option<&dyn Reranker>| -> Outcome<PipelineProfile> {
        let query_embedding = profile_query_embedding(embedder, &words, p.n_iters, seed).runtime()?;
        let indexing = profile_indexing_with(embedder, &words, p.n_passages, p.passage_tokens, seed).runtime()?;
        let shape = RerankShape { n_candidates: p.n_candidates, query_tokens: QUERY_TOKENS, passage_tokens: p.rerank_passage_tokens };
        let rerank = reranker.map(|r| profile_rerank(r, &words, shape, p.n_iters, seed)).transpose().runtime()?;
        Ok(PipelineProfile { label, query_embedding, indexing, rerank })
    };
    let small = load_local_embedder(&args.embedder, &vocab)?;
    let two_stage = measure(label_of(&args.embedder), &small, reranker.as_ref().map(|r| r as &dyn Reranker))?;
    let mut profiles = vec![two_stage];
    let mut comparison = None;
    if let Some(large) = &args.large_embedder {
        let large_model = load_local_embedder(large, &vocab)?;
        let one_stage = measure(label_of(large), &large_model, None)?;
        comparison = Some(compare_pipelines(&one_stage, &profiles[0]).runtime()?);
        profiles.insert(0, one_stage);
    }
    out.write_json("profile.json", &serde_json::json!({ "profiles": profiles, "comparison": comparison }))?;
    for prof in &profiles {
        println!(
            "{}: query {:.2} ms (p95 {:.2}), indexing {:.1} passages/s",
            prof.label, prof.query_embedding.mean_ms, prof.query_embedding.p95_ms, prof.indexing.throughput
        );
        if let Some(r) = &prof.rerank {
            println!("{}: {} {:.2} ms (p95 {:.2})", prof.label, r.scenario, r.mean_ms, r.p95_ms);
        }
    }
    if let Some(c) = &comparison {
        print!("{}", c.summary);
    }
    Ok(())
}

fn serve_cmd(cfg: &RunConfig) -> Outcome {
    if cfg.serve.embedder.is_none() && cfg.serve.reranker.is_none() {
        return usage_err("serve needs serve.embedder or serve.reranker in the config");
    }
    let state = load_state(&cfg.serve).usage()?;
    let addr = format!("{}:{}", cfg.serve.host, cfg.serve.port);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting runtime").runtime()?;
    runtime
        .block_on(async {
            let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
            serve(listener, Arc::new(state)).await.context("server failed")
        })
        .runtime()
}
