//! Corpora, TREC runs, qrels and query sets.
//!
//! Formats:
//! - corpus: JSON lines with `id`, optional `title`, and `text`
//! - run: `qid Q0 docid rank score tag`
//! - qrels: `qid 0 docid grade`
//! - queries: `qid<TAB>text`

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::atomic_write;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    /// Title and body joined, which is what gets indexed.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if d.id.is_empty() {
                return Err(Error::InvalidArgument(format!("document {} has an empty id", i + 1)));
            }
            if by_id.insert(d.id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    id: d.id.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(Corpus { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| {
            for d in &self.docs {
                serde_json::to_writer(&mut *w, d)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(f).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

/// Loads a JSON-lines corpus. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let mut docs = Vec::new();
    let mut by_id = HashMap::new();
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, lineno, format!("malformed document: {e}")))?;
        if doc.id.is_empty() {
            return Err(Error::parse(path, lineno, "empty document id"));
        }
        if by_id.insert(doc.id.clone(), docs.len()).is_some() {
            return Err(Error::DuplicateId {
                id: doc.id,
                line: lineno,
            });
        }
        docs.push(doc);
    }
    Ok(Corpus { docs, by_id })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub doc_id: String,
    pub score: f64,
}

impl RunEntry {
    pub fn new(doc_id: impl Into<String>, score: f64) -> Self {
        RunEntry {
            doc_id: doc_id.into(),
            score,
        }
    }
}

/// Ranked candidate lists keyed by query id. Lists are kept in descending
/// score order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    lists: BTreeMap<String, Vec<RunEntry>>,
}

impl Run {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a list, stably sorting it by descending score. Duplicate
    /// passage ids are rejected.
    pub fn insert(&mut self, qid: impl Into<String>, mut list: Vec<RunEntry>) -> Result<()> {
        let qid = qid.into();
        let mut seen = std::collections::HashSet::with_capacity(list.len());
        for e in &list {
            if !e.score.is_finite() {
                return Err(Error::NonFinite(format!("score of {} for query {qid}", e.doc_id)));
            }
            if !seen.insert(e.doc_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate passage {} in list of query {qid}",
                    e.doc_id
                )));
            }
        }
        list.sort_by(|a, b| b.score.total_cmp(&a.score));
        self.lists.insert(qid, list);
        Ok(())
    }

    pub fn get(&self, qid: &str) -> Option<&[RunEntry]> {
        self.lists.get(qid).map(|v| v.as_slice())
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.lists.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[RunEntry])> {
        self.lists.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn doc_ids(&self, qid: &str) -> Option<Vec<String>> {
        self.get(qid)
            .map(|l| l.iter().map(|e| e.doc_id.clone()).collect())
    }
}

/// Loads a TREC run, keeping the `max_depth` best entries per query. Rank
/// columns are ignored; ties keep file order.
pub fn load_run(path: &Path, max_depth: usize) -> Result<Run> {
    if max_depth == 0 {
        return Err(Error::InvalidArgument("max_depth must be positive".into()));
    }
    let mut lists: BTreeMap<String, Vec<RunEntry>> = BTreeMap::new();
    let mut seen: HashMap<String, std::collections::HashSet<String>> = HashMap::new();
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 6 columns, found {}", cols.len()),
            ));
        }
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("non-numeric score {:?}", cols[4])))?;
        if !score.is_finite() {
            return Err(Error::parse(path, lineno, "non-finite score"));
        }
        let (qid, docid) = (cols[0].to_string(), cols[2].to_string());
        if !seen.entry(qid.clone()).or_default().insert(docid.clone()) {
            return Err(Error::parse(
                path,
                lineno,
                format!("duplicate entry for query {qid}, passage {docid}"),
            ));
        }
        lists.entry(qid).or_default().push(RunEntry::new(docid, score));
    }
    for list in lists.values_mut() {
        list.sort_by(|a, b| b.score.total_cmp(&a.score));
        list.truncate(max_depth);
    }
    Ok(Run { lists })
}

/// Formats a score with 6 significant digits, `%g` style.
pub fn format_score(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.5e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        trim_zeros(&s).to_string()
    } else {
        format!("{}e{}", trim_zeros(mantissa), exp)
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_run(run: &Run, path: &Path, tag: &str) -> Result<()> {
    if tag.is_empty() || tag.contains(char::is_whitespace) {
        return Err(Error::InvalidArgument(format!("invalid run tag {tag:?}")));
    }
    atomic_write(path, |w| {
        for (qid, list) in run.iter() {
            for (rank, e) in list.iter().enumerate() {
                writeln!(w, "{} Q0 {} {} {} {}", qid, e.doc_id, rank + 1, format_score(e.score), tag)?;
            }
        }
        Ok(())
    })
}

/// Graded relevance judgments. Grade >= 1 means positive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: impl Into<String>, doc_id: impl Into<String>, grade: u32) -> Option<u32> {
        self.judgments
            .entry(qid.into())
            .or_default()
            .insert(doc_id.into(), grade)
    }

    pub fn grade(&self, qid: &str, doc_id: &str) -> Option<u32> {
        self.judgments.get(qid).and_then(|m| m.get(doc_id)).copied()
    }

    pub fn is_positive(&self, qid: &str, doc_id: &str) -> bool {
        self.grade(qid, doc_id).is_some_and(|g| g >= 1)
    }

    pub fn query(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(qid)
    }

    pub fn contains_query(&self, qid: &str) -> bool {
        self.judgments.contains_key(qid)
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, u32>)> {
        self.judgments.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| {
            for (qid, docs) in &self.judgments {
                for (doc, grade) in docs {
                    writeln!(w, "{qid} 0 {doc} {grade}")?;
                }
            }
            Ok(())
        })
    }
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 4 columns, found {}", cols.len()),
            ));
        }
        let grade: i64 = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("non-integer grade {:?}", cols[3])))?;
        if grade < 0 {
            return Err(Error::parse(path, lineno, format!("negative grade {grade}")));
        }
        let grade = u32::try_from(grade).map_err(|_| Error::parse(path, lineno, "grade out of range"))?;
        if let Some(prev) = qrels.insert(cols[0], cols[2], grade) {
            log::warn!(
                "{}:{lineno}: judgment for ({}, {}) overrides earlier grade {prev}",
                path.display(),
                cols[0],
                cols[2]
            );
        }
    }
    Ok(qrels)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuerySet {
    queries: BTreeMap<String, String>,
}

impl QuerySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: impl Into<String>, text: impl Into<String>) -> Result<()> {
        let qid = qid.into();
        if self.queries.contains_key(&qid) {
            return Err(Error::DuplicateId { id: qid, line: self.queries.len() + 1 });
        }
        self.queries.insert(qid, text.into());
        Ok(())
    }

    pub fn get(&self, qid: &str) -> Option<&str> {
        self.queries.get(qid).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.queries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| {
            for (qid, text) in &self.queries {
                writeln!(w, "{qid}\t{}", text.replace(['\t', '\n'], " "))?;
            }
            Ok(())
        })
    }
}

/// Loads `qid<TAB>text` lines.
pub fn load_queries(path: &Path) -> Result<QuerySet> {
    let mut set = QuerySet::new();
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (qid, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, lineno, "expected qid<TAB>text"))?;
        if set.queries.contains_key(qid) {
            return Err(Error::DuplicateId {
                id: qid.to_string(),
                line: lineno,
            });
        }
        set.queries.insert(qid.to_string(), text.to_string());
    }
    Ok(set)
}
