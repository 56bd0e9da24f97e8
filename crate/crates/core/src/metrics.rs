//! Ranking metrics over TREC runs and graded qrels.
//!
//! A document is relevant when its grade is at least 1. Averages are taken
//! over run queries that appear in the qrels; the rest are reported as
//! skipped. NDCG additionally skips queries whose ideal DCG is zero.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde_json::{Map, Value};

use crate::corpus::{Qrels, Run, RunEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Recall(usize),
    Mrr(usize),
    Ndcg(usize),
}

impl Metric {
    pub fn depth(self) -> usize {
        match self {
            Metric::Recall(k) | Metric::Mrr(k) | Metric::Ndcg(k) => k,
        }
    }

    /// `r@1,r@5,r@10,r@20,r@50,mrr@10,ndcg@10`
    pub fn standard() -> Vec<Metric> {
        vec![
            Metric::Recall(1),
            Metric::Recall(5),
            Metric::Recall(10),
            Metric::Recall(20),
            Metric::Recall(50),
            Metric::Mrr(10),
            Metric::Ndcg(10),
        ]
    }

    pub fn parse_list(spec: &str) -> Result<Vec<Metric>> {
        spec.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Recall(k) => write!(f, "r@{k}"),
            Metric::Mrr(k) => write!(f, "mrr@{k}"),
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let bad = || Error::InvalidArgument(format!("unknown metric `{s}` (expected r@k, mrr@k or ndcg@k)"));
        let (name, k) = lower.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(Error::InvalidArgument(format!("metric `{s}` needs k >= 1")));
        }
        match name {
            "r" | "recall" => Ok(Metric::Recall(k)),
            "mrr" => Ok(Metric::Mrr(k)),
            "ndcg" => Ok(Metric::Ndcg(k)),
            _ => Err(bad()),
        }
    }
}

fn grade(judged: &BTreeMap<String, u32>, doc: &str) -> u32 {
    judged.get(doc).copied().unwrap_or(0)
}

/// 1 when a relevant document is in the top `k`, else 0.
pub fn recall_query(list: &[RunEntry], judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    let hit = list.iter().take(k).any(|e| grade(judged, &e.doc_id) >= 1);
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Reciprocal rank of the first relevant document within the top `k`.
pub fn reciprocal_rank_query(list: &[RunEntry], judged: &BTreeMap<String, u32>, k: usize) -> f64 {
    list.iter()
        .take(k)
        .position(|e| grade(judged, &e.doc_id) >= 1)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

fn gain(g: u32) -> f64 {
    2f64.powi(g as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// NDCG@k with exponential gain. The ideal ordering is taken over every
/// judged document, retrieved or not. `None` when the ideal DCG is zero.
pub fn ndcg_query(list: &[RunEntry], judged: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    let dcg: f64 = list
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, e)| gain(grade(judged, &e.doc_id)) * discount(i + 1))
        .sum();
    let mut grades: Vec<u32> = judged.values().copied().collect();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let ideal: f64 = grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) * discount(i + 1))
        .sum();
    (ideal > 0.0).then(|| dcg / ideal)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub queries_evaluated: usize,
    pub queries_skipped: usize,
}

fn average<F>(run: &Run, qrels: &Qrels, mut per_query: F) -> MetricValue
where
    F: FnMut(&[RunEntry], &BTreeMap<String, u32>) -> Option<f64>,
{
    let (mut sum, mut evaluated, mut skipped) = (0.0, 0, 0);
    for (qid, list) in run.iter() {
        match qrels.query(qid).and_then(|judged| per_query(list, judged)) {
            Some(v) => {
                sum += v;
                evaluated += 1;
            }
            None => skipped += 1,
        }
    }
    MetricValue {
        value: if evaluated == 0 { 0.0 } else { sum / evaluated as f64 },
        queries_evaluated: evaluated,
        queries_skipped: skipped,
    }
}

pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> MetricValue {
    average(run, qrels, |l, j| Some(recall_query(l, j, k)))
}

pub fn mrr_at_k(run: &Run, qrels: &Qrels, k: usize) -> MetricValue {
    average(run, qrels, |l, j| Some(reciprocal_rank_query(l, j, k)))
}

pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> MetricValue {
    average(run, qrels, |l, j| ndcg_query(l, j, k))
}

pub fn compute(metric: Metric, run: &Run, qrels: &Qrels) -> MetricValue {
    match metric {
        Metric::Recall(k) => recall_at_k(run, qrels, k),
        Metric::Mrr(k) => mrr_at_k(run, qrels, k),
        Metric::Ndcg(k) => ndcg_at_k(run, qrels, k),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub values: Vec<(Metric, f64)>,
    /// Run queries found in the qrels.
    pub queries_evaluated: usize,
    /// Run queries absent from the qrels.
    pub queries_skipped: usize,
    /// Queries left out of NDCG because no judged document has a positive grade.
    pub ndcg_zero_ideal: usize,
}

impl MetricReport {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.values.iter().find(|(m, _)| *m == metric).map(|(_, v)| *v)
    }

    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        for (m, v) in &self.values {
            obj.insert(m.to_string(), Value::from(*v));
        }
        obj.insert("queries_evaluated".into(), Value::from(self.queries_evaluated));
        obj.insert("queries_skipped".into(), Value::from(self.queries_skipped));
        if self.ndcg_zero_ideal > 0 {
            obj.insert("ndcg_zero_ideal".into(), Value::from(self.ndcg_zero_ideal));
        }
        Value::Object(obj)
    }
}

pub fn evaluate(run: &Run, qrels: &Qrels, metrics: &[Metric]) -> MetricReport {
    let judged = run.queries().filter(|q| qrels.contains_query(q)).count();
    let mut ndcg_zero_ideal = 0;
    let values = metrics
        .iter()
        .map(|&m| {
            let v = compute(m, run, qrels);
            if let Metric::Ndcg(_) = m {
                ndcg_zero_ideal = ndcg_zero_ideal.max(v.queries_skipped - (run.len() - judged));
            }
            (m, v.value)
        })
        .collect();
    if ndcg_zero_ideal > 0 {
        log::warn!("{ndcg_zero_ideal} queries have no relevant judgments and are left out of NDCG");
    }
    MetricReport {
        values,
        queries_evaluated: judged,
        queries_skipped: run.len() - judged,
        ndcg_zero_ideal,
    }
}
