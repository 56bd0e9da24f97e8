//! Lexical statistics and BM25 scoring.
//!
//! A passage can stand in for a query: its distinct terms are scored against
//! another indexed passage, which gives the passage-to-anchor sparse similarity.

use std::collections::{BTreeSet, HashMap};
use std::io::{Cursor, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::io_util::{atomic_write, binary_err, expect_magic, read_file, read_str, write_str};

pub const INDEX_MAGIC: &[u8; 8] = b"HYBIDX1\0";
pub const TOKENIZER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        let p = Bm25Params { k1, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(Error::InvalidArgument(format!("k1 must be positive, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::InvalidArgument(format!("b must lie in [0, 1], got {}", self.b)));
        }
        Ok(())
    }
}

/// Lowercases and splits on maximal runs of Unicode alphanumerics, with an
/// optional stopword list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tokenizer {
    stopwords: BTreeSet<String>,
}

impl Tokenizer {
    pub fn with_stopwords<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Tokenizer {
            stopwords: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
        }
    }

    pub fn stopwords(&self) -> impl Iterator<Item = &str> {
        self.stopwords.iter().map(|s| s.as_str())
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = tokenize(text);
        if !self.stopwords.is_empty() {
            out.retain(|t| !self.stopwords.contains(t));
        }
        out
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_lowercase())
        .collect()
}

/// Corpus term statistics.
#[derive(Debug, Clone)]
pub struct TermIndex {
    params: Bm25Params,
    tokenizer: Tokenizer,
    vocab: HashMap<String, u32>,
    terms: Vec<String>,
    df: Vec<u32>,
    doc_ids: Vec<String>,
    doc_pos: HashMap<String, usize>,
    doc_len: Vec<u32>,
    // (term id, count), sorted by term id
    doc_terms: Vec<Vec<(u32, u32)>>,
    avg_len: f64,
}

impl TermIndex {
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Result<Self> {
        Self::build_with_tokenizer(corpus, params, Tokenizer::default())
    }

    pub fn build_with_tokenizer(corpus: &Corpus, params: Bm25Params, tokenizer: Tokenizer) -> Result<Self> {
        params.validate()?;
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("cannot index an empty corpus".into()));
        }
        let mut vocab: HashMap<String, u32> = HashMap::new();
        let mut terms = Vec::new();
        let mut df: Vec<u32> = Vec::new();
        let mut doc_ids = Vec::with_capacity(corpus.len());
        let mut doc_pos = HashMap::with_capacity(corpus.len());
        let mut doc_len = Vec::with_capacity(corpus.len());
        let mut doc_terms = Vec::with_capacity(corpus.len());

        for doc in corpus.documents() {
            let tokens = tokenizer.tokenize(&doc.full_text());
            let mut counts: HashMap<u32, u32> = HashMap::new();
            for tok in &tokens {
                let id = match vocab.get(tok) {
                    Some(&id) => id,
                    None => {
                        let id = terms.len() as u32;
                        vocab.insert(tok.clone(), id);
                        terms.push(tok.clone());
                        df.push(0);
                        id
                    }
                };
                *counts.entry(id).or_insert(0) += 1;
            }
            let mut entries: Vec<(u32, u32)> = counts.into_iter().collect();
            entries.sort_unstable();
            for &(t, _) in &entries {
                df[t as usize] += 1;
            }
            doc_pos.insert(doc.id.clone(), doc_ids.len());
            doc_ids.push(doc.id.clone());
            doc_len.push(tokens.len() as u32);
            doc_terms.push(entries);
        }
        let avg_len = mean_len(&doc_len);
        Ok(TermIndex {
            params,
            tokenizer,
            vocab,
            terms,
            df,
            doc_ids,
            doc_pos,
            doc_len,
            doc_terms,
            avg_len,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn contains_doc(&self, doc_id: &str) -> bool {
        self.doc_pos.contains_key(doc_id)
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    fn doc_index(&self, doc_id: &str) -> Result<usize> {
        self.doc_pos
            .get(doc_id)
            .copied()
            .ok_or_else(|| Error::UnknownId(doc_id.to_string()))
    }

    pub fn doc_len(&self, doc_id: &str) -> Result<u32> {
        Ok(self.doc_len[self.doc_index(doc_id)?])
    }

    /// Document frequency; zero for terms never seen.
    pub fn df(&self, term: &str) -> u32 {
        self.vocab.get(term).map_or(0, |&t| self.df[t as usize])
    }

    pub fn term_count(&self, term: &str, doc_id: &str) -> Result<u32> {
        let d = self.doc_index(doc_id)?;
        Ok(self.vocab.get(term).map_or(0, |&t| self.count_in(d, t)))
    }

    fn count_in(&self, doc: usize, term: u32) -> u32 {
        let entries = &self.doc_terms[doc];
        entries
            .binary_search_by_key(&term, |&(t, _)| t)
            .map_or(0, |i| entries[i].1)
    }

    /// Robertson–Spärck Jones weight, `ln(1 + (Nd - df + 0.5) / (df + 0.5))`.
    pub fn rsj_weight(&self, term: &str) -> f64 {
        rsj(self.num_docs() as f64, self.df(term) as f64)
    }

    fn rsj_id(&self, term: u32) -> f64 {
        rsj(self.num_docs() as f64, self.df[term as usize] as f64)
    }

    fn length_norm(&self, doc: usize, params: &Bm25Params) -> f64 {
        let ratio = if self.avg_len > 0.0 {
            self.doc_len[doc] as f64 / self.avg_len
        } else {
            0.0
        };
        params.k1 * ((1.0 - params.b) + params.b * ratio)
    }

    /// BM25 over the distinct `query_terms` that occur in `doc_id`.
    pub fn bm25_score<I, S>(&self, query_terms: I, doc_id: &str, params: &Bm25Params) -> Result<f64>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let d = self.doc_index(doc_id)?;
        let mut ids: Vec<u32> = query_terms
            .into_iter()
            .filter_map(|t| self.vocab.get(t.as_ref()).copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        Ok(self.score_ids(&ids, d, params))
    }

    fn score_ids(&self, sorted_terms: &[u32], doc: usize, params: &Bm25Params) -> f64 {
        let norm = self.length_norm(doc, params);
        let entries = &self.doc_terms[doc];
        let (mut i, mut j) = (0, 0);
        let mut score = 0.0;
        while i < sorted_terms.len() && j < entries.len() {
            let (t, c) = entries[j];
            match sorted_terms[i].cmp(&t) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    let c = c as f64;
                    score += self.rsj_id(t) * c / (norm + c);
                    i += 1;
                    j += 1;
                }
            }
        }
        score
    }

    /// Sparse similarity with `text_a` acting as the query.
    pub fn sparse_pair_score(&self, text_a: &str, doc_id_b: &str, params: &Bm25Params) -> Result<f64> {
        let toks = self.tokenizer.tokenize(text_a);
        self.bm25_score(toks.iter(), doc_id_b, params)
    }

    /// Resolves the distinct indexed terms of a text, for repeated scoring.
    pub fn query_terms(&self, text: &str) -> QueryTerms {
        let mut ids: Vec<u32> = self
            .tokenizer
            .tokenize(text)
            .iter()
            .filter_map(|t| self.vocab.get(t).copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        QueryTerms(ids)
    }

    /// The distinct terms of an indexed document.
    pub fn doc_query_terms(&self, doc_id: &str) -> Result<QueryTerms> {
        let d = self.doc_index(doc_id)?;
        Ok(QueryTerms(self.doc_terms[d].iter().map(|&(t, _)| t).collect()))
    }

    pub fn score_terms(&self, terms: &QueryTerms, doc_id: &str, params: &Bm25Params) -> Result<f64> {
        let d = self.doc_index(doc_id)?;
        Ok(self.score_ids(&terms.0, d, params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        atomic_write(path, |w| w.write_all(&bytes))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        self.write_to(&mut w).expect("writing to a Vec cannot fail");
        w
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(TOKENIZER_VERSION)?;
        w.write_f64::<LittleEndian>(self.params.k1)?;
        w.write_f64::<LittleEndian>(self.params.b)?;
        w.write_u32::<LittleEndian>(self.tokenizer.stopwords.len() as u32)?;
        for s in &self.tokenizer.stopwords {
            write_str(w, s)?;
        }
        w.write_u32::<LittleEndian>(self.terms.len() as u32)?;
        for (term, df) in self.terms.iter().zip(&self.df) {
            write_str(w, term)?;
            w.write_u32::<LittleEndian>(*df)?;
        }
        w.write_u32::<LittleEndian>(self.doc_ids.len() as u32)?;
        for ((id, len), entries) in self.doc_ids.iter().zip(&self.doc_len).zip(&self.doc_terms) {
            write_str(w, id)?;
            w.write_u32::<LittleEndian>(*len)?;
            w.write_u32::<LittleEndian>(entries.len() as u32)?;
            for &(t, c) in entries {
                w.write_u32::<LittleEndian>(t)?;
                w.write_u32::<LittleEndian>(c)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes).map_err(|e| binary_err(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::io::Result<Self> {
        use std::io::{Error as IoError, ErrorKind};
        let bad = |msg: String| IoError::new(ErrorKind::InvalidData, msg);
        let mut r = Cursor::new(bytes);
        expect_magic(&mut r, INDEX_MAGIC)?;
        let version = r.read_u32::<LittleEndian>()?;
        if version != TOKENIZER_VERSION {
            return Err(bad(format!("unsupported tokenizer version {version}")));
        }
        let params = Bm25Params {
            k1: r.read_f64::<LittleEndian>()?,
            b: r.read_f64::<LittleEndian>()?,
        };
        params.validate().map_err(|e| bad(e.to_string()))?;
        let n_stop = r.read_u32::<LittleEndian>()?;
        let mut stopwords = BTreeSet::new();
        for _ in 0..n_stop {
            stopwords.insert(read_str(&mut r)?);
        }
        let n_terms = r.read_u32::<LittleEndian>()? as usize;
        let mut terms = Vec::with_capacity(n_terms.min(bytes.len()));
        let mut df = Vec::with_capacity(n_terms.min(bytes.len()));
        let mut vocab = HashMap::with_capacity(n_terms.min(bytes.len()));
        for i in 0..n_terms {
            let t = read_str(&mut r)?;
            if vocab.insert(t.clone(), i as u32).is_some() {
                return Err(bad(format!("duplicate term {t:?}")));
            }
            terms.push(t);
            df.push(r.read_u32::<LittleEndian>()?);
        }
        let n_docs = r.read_u32::<LittleEndian>()? as usize;
        let mut doc_ids = Vec::new();
        let mut doc_pos = HashMap::new();
        let mut doc_len = Vec::new();
        let mut doc_terms = Vec::new();
        for _ in 0..n_docs {
            let id = read_str(&mut r)?;
            if doc_pos.insert(id.clone(), doc_ids.len()).is_some() {
                return Err(bad(format!("duplicate document {id:?}")));
            }
            doc_ids.push(id);
            doc_len.push(r.read_u32::<LittleEndian>()?);
            let n = r.read_u32::<LittleEndian>()? as usize;
            let mut entries = Vec::with_capacity(n.min(bytes.len()));
            for _ in 0..n {
                let t = r.read_u32::<LittleEndian>()?;
                let c = r.read_u32::<LittleEndian>()?;
                if t as usize >= n_terms {
                    return Err(bad(format!("term id {t} out of range")));
                }
                entries.push((t, c));
            }
            doc_terms.push(entries);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes after index".into()));
        }
        if df.iter().any(|&d| d as usize > n_docs) {
            return Err(bad("document frequency exceeds corpus size".into()));
        }
        let avg_len = mean_len(&doc_len);
        Ok(TermIndex {
            params,
            tokenizer: Tokenizer { stopwords },
            vocab,
            terms,
            df,
            doc_ids,
            doc_pos,
            doc_len,
            doc_terms,
            avg_len,
        })
    }
}

/// Distinct, resolved term ids of a query-side text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTerms(Vec<u32>);

impl QueryTerms {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn rsj(num_docs: f64, df: f64) -> f64 {
    (1.0 + (num_docs - df + 0.5) / (df + 0.5)).ln()
}

fn mean_len(lens: &[u32]) -> f64 {
    if lens.is_empty() {
        0.0
    } else {
        lens.iter().map(|&l| l as f64).sum::<f64>() / lens.len() as f64
    }
}
