//! BEIR-layout datasets: `corpus.jsonl`, `queries.jsonl`, `qrels/test.tsv`,
//! plus a seeded generator for desk-scale synthetic Q&A data.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    #[serde(rename = "_id")]
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Passage {
    /// Title and body joined the way encoders consume them.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    #[serde(rename = "_id")]
    pub id: String,
    pub text: String,
}

/// Graded relevance judgments, query id → passage id → grade.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    pub judgments: BTreeMap<String, BTreeMap<String, u32>>,
    /// Number of repeated (query, passage) rows resolved last-wins while loading.
    #[serde(default)]
    pub duplicates: usize,
}

impl Qrels {
    pub fn insert(&mut self, query_id: &str, passage_id: &str, grade: u32) {
        let prev = self
            .judgments
            .entry(query_id.to_string())
            .or_default()
            .insert(passage_id.to_string(), grade);
        if prev.is_some() {
            self.duplicates += 1;
        }
    }

    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    /// Passage ids judged relevant (grade > 0) for a query.
    pub fn relevant(&self, query_id: &str) -> BTreeSet<&str> {
        self.judgments
            .get(query_id)
            .map(|m| m.iter().filter(|(_, &g)| g > 0).map(|(id, _)| id.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub passages: Vec<Passage>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
}

impl Dataset {
    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut passage_ids = HashSet::new();
        for p in &self.passages {
            if p.id.is_empty() {
                problems.push("passage with empty id".to_string());
            }
            if !passage_ids.insert(p.id.as_str()) {
                problems.push(format!("duplicate passage id `{}`", p.id));
            }
            if p.text.trim().is_empty() {
                problems.push(format!("passage `{}` has empty text", p.id));
            }
        }
        let mut query_ids = HashSet::new();
        for q in &self.queries {
            if !query_ids.insert(q.id.as_str()) {
                problems.push(format!("duplicate query id `{}`", q.id));
            }
            if q.text.trim().is_empty() {
                problems.push(format!("query `{}` has empty text", q.id));
            }
        }
        for (qid, judged) in &self.qrels.judgments {
            if !query_ids.contains(qid.as_str()) {
                problems.push(format!("qrels reference unknown query `{qid}`"));
            }
            for pid in judged.keys() {
                if !passage_ids.contains(pid.as_str()) {
                    problems.push(format!("qrels ({qid}, {pid}) reference unknown passage `{pid}`"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn passage_index(&self) -> BTreeMap<&str, &Passage> {
        self.passages.iter().map(|p| (p.id.as_str(), p)).collect()
    }

    /// Writes the BEIR layout under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("qrels")).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("corpus.jsonl"), &self.passages)?;
        write_jsonl(&dir.join("queries.jsonl"), &self.queries)?;
        let mut tsv = String::from("query-id\tcorpus-id\tscore\n");
        for (qid, judged) in &self.qrels.judgments {
            for (pid, grade) in judged {
                tsv.push_str(&format!("{qid}\t{pid}\t{grade}\n"));
            }
        }
        let qrels_path = dir.join("qrels").join("test.tsv");
        fs::write(&qrels_path, tsv).map_err(|e| Error::io(&qrels_path, e))
    }

    /// Loads a BEIR directory. The dataset name defaults to the directory name.
    pub fn load(dir: &Path) -> Result<Self> {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string());
        Ok(Self {
            name,
            passages: load_corpus(&dir.join("corpus.jsonl"))?,
            queries: load_queries(&dir.join("queries.jsonl"))?,
            qrels: load_qrels(&dir.join("qrels").join("test.tsv"))?,
        })
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Yields `(1-based line number, line)` with trailing `\r` stripped and blank lines skipped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(
    text: &str,
    file: &str,
    id_of: impl Fn(&T) -> &str,
) -> Result<Vec<T>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line_no, line) in content_lines(text) {
        let row: T = serde_json::from_str(line).map_err(|e| Error::Parse {
            file: file.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(id_of(&row).to_string()) {
            return Err(Error::DuplicateId(id_of(&row).to_string()));
        }
        out.push(row);
    }
    Ok(out)
}

pub fn parse_corpus(text: &str, file: &str) -> Result<Vec<Passage>> {
    parse_jsonl(text, file, |p: &Passage| &p.id)
}

pub fn parse_queries(text: &str, file: &str) -> Result<Vec<Query>> {
    parse_jsonl(text, file, |q: &Query| &q.id)
}

pub fn parse_qrels(text: &str, file: &str) -> Result<Qrels> {
    let mut qrels = Qrels::default();
    let mut lines = content_lines(text).peekable();
    if let Some((_, first)) = lines.peek() {
        if first.starts_with("query-id") {
            lines.next();
        }
    }
    for (line_no, line) in lines {
        let cols: Vec<&str> = if line.contains('\t') {
            line.split('\t').map(str::trim).collect()
        } else {
            line.split_whitespace().collect()
        };
        let err = |message: String| Error::Parse { file: file.to_string(), line: line_no, message };
        if cols.len() != 3 {
            return Err(err(format!("expected 3 columns, found {}", cols.len())));
        }
        let grade: u32 = cols[2]
            .parse()
            .map_err(|_| err(format!("score `{}` is not a non-negative integer", cols[2])))?;
        qrels.insert(cols[0], cols[1], grade);
    }
    if qrels.duplicates > 0 {
        log::warn!("{file}: {} duplicate qrels rows resolved last-wins", qrels.duplicates);
    }
    Ok(qrels)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Passage>> {
    parse_corpus(&read_text(path)?, &path.display().to_string())
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    parse_queries(&read_text(path)?, &path.display().to_string())
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    parse_qrels(&read_text(path)?, &path.display().to_string())
}

/// Knobs of the synthetic generator.
///
/// The word list is split into `n_filler` shared filler words followed by
/// `n_topics` equally sized topic pools. Passages come in families that share
/// `shared_words` topic words and differ in `own_words`, so near-duplicate
/// distractors exist for every positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_filler: usize,
    pub n_topics: usize,
    pub family_size: usize,
    pub shared_words: usize,
    pub own_words: usize,
    pub filler_per_passage: usize,
    pub query_own_words: usize,
    pub query_shared_words: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_filler: 30,
            n_topics: 12,
            family_size: 4,
            shared_words: 4,
            own_words: 4,
            filler_per_passage: 4,
            query_own_words: 2,
            query_shared_words: 1,
        }
    }
}

/// Deterministic pronounceable pseudo-words, all distinct.
pub fn synthetic_word_list(n: usize) -> Vec<String> {
    const ONSETS: [&str; 16] =
        ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    let syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}")))
        .collect();
    let base = syllables.len();
    (0..n)
        .map(|i| {
            let (a, b, c) = (i % base, (i / base) % base, i / (base * base));
            let mut w = format!("{}{}", syllables[a], syllables[(a * 7 + b) % base]);
            if c > 0 {
                w.push_str(&syllables[c % base]);
                w.push_str(&c.to_string());
            }
            w
        })
        .collect()
}

pub fn make_synthetic_dataset(
    seed: u64,
    n_queries: usize,
    n_passages: usize,
    words: &[String],
) -> Result<Dataset> {
    make_synthetic_dataset_with(seed, n_queries, n_passages, words, &SyntheticConfig::default())
}

pub fn make_synthetic_dataset_with(
    seed: u64,
    n_queries: usize,
    n_passages: usize,
    words: &[String],
    cfg: &SyntheticConfig,
) -> Result<Dataset> {
    if n_queries == 0 || n_passages < n_queries {
        return Err(Error::InvalidInput(format!(
            "synthetic dataset needs n_passages >= n_queries >= 1 (got {n_passages}, {n_queries})"
        )));
    }
    let per_passage = cfg.shared_words + cfg.own_words;
    if cfg.n_topics == 0 || cfg.family_size == 0 || cfg.query_own_words == 0 {
        return Err(Error::Config("synthetic: n_topics, family_size, query_own_words must be >= 1".into()));
    }
    if cfg.query_own_words > cfg.own_words || cfg.query_shared_words > cfg.shared_words {
        return Err(Error::Config("synthetic: query draws more words than a passage owns".into()));
    }
    if words.len() < cfg.n_filler + cfg.n_topics * per_passage.max(1) {
        return Err(Error::Config(format!("synthetic: word list of {} is too small", words.len())));
    }
    if cfg.filler_per_passage > cfg.n_filler {
        return Err(Error::Config("synthetic: filler_per_passage exceeds n_filler".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler = &words[..cfg.n_filler];
    let pool_size = (words.len() - cfg.n_filler) / cfg.n_topics;
    let topic_pool = |t: usize| &words[cfg.n_filler + t * pool_size..cfg.n_filler + (t + 1) * pool_size];

    // Content words of each passage: (shared, own).
    let mut content: Vec<(Vec<&String>, Vec<&String>)> = Vec::with_capacity(n_passages);
    let mut passages = Vec::with_capacity(n_passages);
    let mut family_shared: Vec<&String> = Vec::new();
    let mut family_topic = 0;
    for i in 0..n_passages {
        if i % cfg.family_size == 0 {
            family_topic = rng.random_range(0..cfg.n_topics);
            family_shared = topic_pool(family_topic).choose_multiple(&mut rng, cfg.shared_words).collect();
        }
        let own: Vec<&String> = topic_pool(family_topic)
            .iter()
            .filter(|w| !family_shared.contains(w))
            .collect::<Vec<_>>()
            .choose_multiple(&mut rng, cfg.own_words)
            .copied()
            .collect();
        let mut tokens: Vec<&String> = family_shared.iter().chain(own.iter()).copied().collect();
        tokens.extend(filler.choose_multiple(&mut rng, cfg.filler_per_passage));
        tokens.shuffle(&mut rng);
        passages.push(Passage {
            id: format!("d{i:05}"),
            title: String::new(),
            text: join_words(&tokens),
        });
        content.push((family_shared.clone(), own));
    }

    let word_sets: Vec<HashSet<&String>> =
        content.iter().map(|(s, o)| s.iter().chain(o.iter()).copied().collect()).collect();
    let mut positives: Vec<usize> = (0..n_passages).collect();
    positives.shuffle(&mut rng);
    positives.truncate(n_queries);

    let mut queries = Vec::with_capacity(n_queries);
    let mut qrels = Qrels::default();
    for (qi, &pi) in positives.iter().enumerate() {
        let (shared, own) = &content[pi];
        let mut chosen = Vec::new();
        for attempt in 0..64 {
            let extra = attempt / 16;
            let mut q: Vec<&String> = own
                .choose_multiple(&mut rng, (cfg.query_own_words + extra).min(own.len()))
                .copied()
                .collect();
            q.extend(shared.choose_multiple(&mut rng, cfg.query_shared_words).copied());
            let ambiguous = word_sets
                .iter()
                .enumerate()
                .any(|(j, set)| j != pi && q.iter().all(|w| set.contains(w)));
            chosen = q;
            if !ambiguous {
                break;
            }
        }
        if rng.random_bool(0.5) && !filler.is_empty() {
            chosen.push(filler.choose(&mut rng).expect("non-empty filler"));
        }
        chosen.shuffle(&mut rng);
        let qid = format!("q{qi:05}");
        qrels.insert(&qid, &passages[pi].id, 1);
        queries.push(Query { id: qid, text: join_words(&chosen) });
    }
    Ok(Dataset { name: format!("synthetic-{seed}"), passages, queries, qrels })
}

fn join_words(words: &[&String]) -> String {
    words.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ")
}
