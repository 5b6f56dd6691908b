//! Word-level vocabulary and the `[BOS] query [SEP] passage` pair encoding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const SEP: u32 = 3;
pub const N_SPECIAL: usize = 4;
const SPECIAL_NAMES: [&str; N_SPECIAL] = ["[PAD]", "[UNK]", "[BOS]", "[SEP]"];

/// Lowercases and splits on whitespace; every punctuation character becomes its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    to_id: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Keeps the `max_size - 4` most frequent tokens, ties broken lexicographically.
    pub fn build<'a, I>(texts: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < N_SPECIAL + 1 {
            return Err(Error::Config(format!("vocab max_size must be >= 5, got {max_size}")));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut n_texts = 0;
        for text in texts {
            n_texts += 1;
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if n_texts == 0 {
            return Err(Error::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - N_SPECIAL);
        Ok(Self::from_words(ranked.into_iter().map(|(w, _)| w)))
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let to_id = tokens
            .iter()
            .enumerate()
            .skip(N_SPECIAL)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { to_id, tokens }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn ids(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Joins non-special, known tokens with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id as usize >= N_SPECIAL)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Four special-token header lines, then one token per line (line index = id).
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < N_SPECIAL || lines[..N_SPECIAL] != SPECIAL_NAMES {
            return Err(Error::Format("vocab file must start with the 4 special-token lines".into()));
        }
        let words: Vec<String> = lines[N_SPECIAL..].iter().map(|s| s.to_string()).collect();
        let vocab = Self::from_words(words);
        if vocab.to_id.len() != vocab.size() - N_SPECIAL {
            return Err(Error::Format("vocab file contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Token ids with a keep-mask; `keep[i] == false` exactly where `ids[i] == PAD`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub keep: Vec<bool>,
}

impl TokenSeq {
    fn padded(mut ids: Vec<u32>, max_len: usize) -> Self {
        ids.truncate(max_len);
        let n = ids.len();
        ids.resize(max_len, PAD);
        let keep = (0..max_len).map(|i| i < n).collect();
        Self { ids, keep }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Appends padding positions up to `len`.
    pub fn pad_to(&self, len: usize) -> Self {
        let mut out = self.clone();
        out.ids.resize(len.max(self.len()), PAD);
        out.keep.resize(len.max(self.len()), false);
        out
    }
}

pub fn encode(vocab: &Vocab, text: &str, max_len: usize) -> TokenSeq {
    let max_len = max_len.max(2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(vocab.ids(text).into_iter().take(max_len - 1));
    TokenSeq::padded(ids, max_len)
}

/// `[BOS] query [SEP] passage`, truncating passage tokens before query tokens.
pub fn encode_pair(vocab: &Vocab, query: &str, passage: &str, max_len: usize) -> TokenSeq {
    let max_len = max_len.max(4);
    let budget = max_len - 2;
    let q = vocab.ids(query);
    let p = vocab.ids(passage);
    let q_keep = q.len().min(budget);
    let p_keep = p.len().min(budget - q_keep);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend_from_slice(&q[..q_keep]);
    ids.push(SEP);
    ids.extend_from_slice(&p[..p_keep]);
    TokenSeq::padded(ids, max_len)
}
