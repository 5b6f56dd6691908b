//! Passage embedding store: exact maximum-inner-product search, an IVF-style
//! clustered approximate search, and a versioned binary file format.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, l2_norm, normalize_in_place};

const MAGIC: &[u8; 4] = b"SRIX";
const VERSION: u32 = 1;
const UNIT_TOL: f32 = 1e-5;
const KMEANS_ITERS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub passage_id: String,
    pub score: f32,
}

pub type SearchResult = Vec<SearchHit>;

#[derive(Clone, Debug, PartialEq)]
pub struct Clusters {
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
}

impl Clusters {
    pub fn n_lists(&self) -> usize {
        self.lists.len()
    }

    pub fn list(&self, i: usize) -> &[u32] {
        &self.lists[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorIndex {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    /// Position of each row's id in ascending id order, for tie-breaking.
    id_rank: Vec<u32>,
    row_of: HashMap<String, usize>,
    clusters: Option<Clusters>,
    fingerprint: String,
}

/// Ordering of hits: higher score first, then lower id rank.
fn hit_order(a: (f32, u32), b: (f32, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl VectorIndex {
    /// Builds an index; every embedding must be unit-norm and of one dimension.
    pub fn build(ids: Vec<String>, embeddings: Vec<Vec<f32>>) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(Error::Shape(format!("{} ids but {} embeddings", ids.len(), embeddings.len())));
        }
        let dim = embeddings.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(dim * ids.len());
        for (id, e) in ids.iter().zip(&embeddings) {
            if e.len() != dim {
                return Err(Error::Shape(format!("embedding of `{id}` has dimension {}, expected {dim}", e.len())));
            }
            let norm = l2_norm(e);
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidInput(format!("embedding of `{id}` is not unit-norm (|v| = {norm})")));
            }
            data.extend_from_slice(e);
        }
        Self::from_parts(ids, dim, data, None, String::new())
    }

    fn from_parts(
        ids: Vec<String>,
        dim: usize,
        data: Vec<f32>,
        clusters: Option<Clusters>,
        fingerprint: String,
    ) -> Result<Self> {
        let mut row_of = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if row_of.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        let mut id_rank = vec![0u32; ids.len()];
        for (rank, &row) in order.iter().enumerate() {
            id_rank[row] = rank as u32;
        }
        Ok(Self { ids, dim, data, id_rank, row_of, clusters, fingerprint })
    }

    /// Tags the index with the fingerprint of the embedder that produced it.
    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.fingerprint = fingerprint.into();
        self
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.row_of.get(id).map(|&i| self.row(i))
    }

    pub fn clusters(&self) -> Option<&Clusters> {
        self.clusters.as_ref()
    }

    fn check_query(&self, query: &[f32]) -> Result<()> {
        if !self.is_empty() && query.len() != self.dim {
            return Err(Error::Shape(format!("query has dimension {}, index has {}", query.len(), self.dim)));
        }
        Ok(())
    }

    fn top_k(&self, query: &[f32], rows: impl Iterator<Item = usize>, k: usize) -> SearchResult {
        let mut scored: Vec<(f32, u32, usize)> =
            rows.map(|r| (dot(query, self.row(r)), self.id_rank[r], r)).collect();
        let cmp = |a: &(f32, u32, usize), b: &(f32, u32, usize)| hit_order((a.0, a.1), (b.0, b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        scored
            .into_iter()
            .map(|(score, _, r)| SearchHit { passage_id: self.ids[r].clone(), score })
            .collect()
    }

    /// Exact top-k by inner product, ties broken by passage id ascending.
    pub fn search_exact(&self, query: &[f32], k: usize) -> Result<SearchResult> {
        self.check_query(query)?;
        Ok(self.top_k(query, 0..self.len(), k))
    }

    /// Seeded spherical k-means with a fixed iteration count.
    pub fn build_clusters(&mut self, n_lists: usize, seed: u64) -> Result<()> {
        if n_lists == 0 || n_lists > self.len() {
            return Err(Error::Config(format!("n_lists must be in 1..={}, got {n_lists}", self.len())));
        }
        let d = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids: Vec<f32> = Vec::with_capacity(n_lists * d);
        for row in sample(&mut rng, self.len(), n_lists).into_iter() {
            centroids.extend_from_slice(self.row(row));
        }
        let mut assign = vec![0u32; self.len()];
        for _ in 0..KMEANS_ITERS {
            for (r, a) in assign.iter_mut().enumerate() {
                *a = nearest_centroids(&centroids, d, self.row(r), 1)[0] as u32;
            }
            let mut sums = vec![0f32; n_lists * d];
            let mut counts = vec![0usize; n_lists];
            for (r, &a) in assign.iter().enumerate() {
                counts[a as usize] += 1;
                for (s, &x) in sums[a as usize * d..(a as usize + 1) * d].iter_mut().zip(self.row(r)) {
                    *s += x;
                }
            }
            for c in 0..n_lists {
                if counts[c] > 0 {
                    let mean = &mut sums[c * d..(c + 1) * d];
                    normalize_in_place(mean);
                    if l2_norm(mean) > 0.0 {
                        centroids[c * d..(c + 1) * d].copy_from_slice(mean);
                    }
                }
            }
        }
        let mut lists = vec![Vec::new(); n_lists];
        for r in 0..self.len() {
            let c = nearest_centroids(&centroids, d, self.row(r), 1)[0];
            lists[c].push(r as u32);
        }
        self.clusters = Some(Clusters { centroids, lists });
        Ok(())
    }

    /// Scans only the lists of the `n_probe` closest centroids.
    pub fn search_ann(&self, query: &[f32], k: usize, n_probe: usize) -> Result<SearchResult> {
        let clusters = self
            .clusters
            .as_ref()
            .ok_or_else(|| Error::Config("clusters not built; call build_clusters first".into()))?;
        if n_probe == 0 || n_probe > clusters.n_lists() {
            return Err(Error::Config(format!("n_probe must be in 1..={}, got {n_probe}", clusters.n_lists())));
        }
        self.check_query(query)?;
        let probes = nearest_centroids(&clusters.centroids, self.dim, query, n_probe);
        let rows = probes.into_iter().flat_map(|c| clusters.lists[c].iter().map(|&r| r as usize));
        Ok(self.top_k(query, rows, k))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        put_str(&mut out, &self.fingerprint);
        for id in &self.ids {
            put_str(&mut out, id);
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        match &self.clusters {
            None => out.push(0),
            Some(c) => {
                out.push(1);
                out.extend_from_slice(&(c.n_lists() as u32).to_le_bytes());
                for x in &c.centroids {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                for list in &c.lists {
                    out.extend_from_slice(&(list.len() as u64).to_le_bytes());
                    for r in list {
                        out.extend_from_slice(&r.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an index file (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("index format version {version} is not supported (expected {VERSION})")));
        }
        let dim = r.u32()? as usize;
        let n = r.u64()? as usize;
        let fingerprint = r.string()?;
        let ids = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(n.checked_mul(dim).ok_or_else(|| Error::Format("index too large".into()))?)?;
        let clusters = match r.take(1)?[0] {
            0 => None,
            1 => {
                let n_lists = r.u32()? as usize;
                let centroids = r.f32s(n_lists * dim)?;
                let mut lists = Vec::with_capacity(n_lists);
                for _ in 0..n_lists {
                    let len = r.u64()? as usize;
                    let list = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                    if list.iter().any(|&m| m as usize >= n) {
                        return Err(Error::Format("cluster member out of range".into()));
                    }
                    lists.push(list);
                }
                Some(Clusters { centroids, lists })
            }
            other => return Err(Error::Format(format!("bad clustering flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after index".into()));
        }
        Self::from_parts(ids, dim, data, clusters, fingerprint)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Indices of the `n` centroids with the largest inner product, ties to the lower index.
fn nearest_centroids(centroids: &[f32], d: usize, v: &[f32], n: usize) -> Vec<usize> {
    let mut scored: Vec<(f32, usize)> =
        centroids.chunks_exact(d).enumerate().map(|(i, c)| (dot(v, c), i)).collect();
    let cmp = |a: &(f32, usize), b: &(f32, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if n == 1 {
        return vec![scored.iter().min_by(|a, b| cmp(a, b)).map_or(0, |s| s.1)];
    }
    scored.sort_by(cmp);
    scored.into_iter().take(n).map(|s| s.1).collect()
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("index file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("id is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("index too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
