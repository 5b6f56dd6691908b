//! NDCG@k and the benchmark report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::Qrels;
use crate::error::{Error, Result};
use crate::pipeline::RetrievalRun;

pub const DEFAULT_K: usize = 10;

/// Exponential-gain NDCG with a log2(rank + 1) discount. `None` when the
/// query has no relevant passage.
pub fn ndcg_at_k<S: AsRef<str>>(ranked: &[S], judged: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
    if ideal.is_empty() {
        return None;
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &g)| gain(g) * discount(i)).sum();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| gain(judged.get(id.as_ref()).copied().unwrap_or(0)) * discount(i))
        .sum();
    Some(dcg / idcg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEval {
    pub mean: f64,
    pub per_query: BTreeMap<String, f64>,
    /// Queries judged but without any relevant passage.
    pub no_relevant: usize,
    /// Run queries absent from the qrels.
    pub unjudged: Vec<String>,
}

pub fn evaluate_run(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<RunEval> {
    if run.entries.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty run".into()));
    }
    let mut per_query = BTreeMap::new();
    let mut no_relevant = 0;
    let mut unjudged = Vec::new();
    for entry in &run.entries {
        match qrels.for_query(&entry.query_id) {
            None => unjudged.push(entry.query_id.clone()),
            Some(judged) => match ndcg_at_k(&entry.ranked, judged, k) {
                Some(v) => {
                    per_query.insert(entry.query_id.clone(), v);
                }
                None => no_relevant += 1,
            },
        }
    }
    if !unjudged.is_empty() {
        log::warn!("{} run queries have no judgments", unjudged.len());
    }
    let mean = if per_query.is_empty() { 0.0 } else { per_query.values().sum::<f64>() / per_query.len() as f64 };
    Ok(RunEval { mean, per_query, no_relevant, unjudged })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub datasets: Vec<String>,
    pub k: usize,
    pub timestamp: u64,
    #[serde(default)]
    pub config_hashes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub avg: f64,
    pub per_dataset: IndexMap<String, f64>,
}

impl ReportRow {
    pub fn new(label: impl Into<String>, per_dataset: IndexMap<String, f64>) -> Self {
        let avg = if per_dataset.is_empty() { 0.0 } else { per_dataset.values().sum::<f64>() / per_dataset.len() as f64 };
        Self { label: label.into(), avg, per_dataset }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn new(datasets: Vec<String>, k: usize) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self { meta: ReportMeta { datasets, k, timestamp, config_hashes: BTreeMap::new() }, rows: Vec::new() }
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("eval report: {e}")))
    }
}

/// Text table: label, Avg, then one column per dataset in report order. With a
/// single dataset the Avg column already holds its value, so only label and Avg are shown.
pub fn render_report(report: &EvalReport) -> String {
    let datasets: &[String] = if report.meta.datasets.len() > 1 { &report.meta.datasets } else { &[] };
    let mut header = vec![format!("NDCG@{}", report.meta.k), "Avg".to_string()];
    header.extend(datasets.iter().cloned());
    let mut table = vec![header];
    for row in &report.rows {
        let mut cells = vec![row.label.clone(), format!("{:.4}", row.avg)];
        for d in datasets {
            cells.push(row.per_dataset.get(d).map_or_else(|| "-".to_string(), |v| format!("{v:.4}")));
        }
        table.push(cells);
    }
    let widths: Vec<usize> =
        (0..table[0].len()).map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &table {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, cell)| if c == 0 { format!("{cell:<w$}", w = widths[c]) } else { format!("{cell:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}
