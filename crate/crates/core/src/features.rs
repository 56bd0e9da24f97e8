//! Collaborative similarity features for one query's candidate list.
//!
//! Row 0 of a [`SimTensor`] is the query, rows `1..=N` are the passages in
//! initial rank order, columns are anchors, and the two channels hold the
//! sparse (BM25) and dense (inner product) similarity.

use std::io::{Cursor, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dense::EmbeddingStore;
use crate::error::{Error, Result};
use crate::io_util::{atomic_write, binary_err, expect_magic, read_file, read_str, write_str};
use crate::sparse::TermIndex;

pub const FEATURE_MAGIC: &[u8; 8] = b"HYBFEA1\0";
pub const SPARSE: usize = 0;
pub const DENSE: usize = 1;

/// Prefix that puts query vectors in their own id space inside a shared
/// embedding store.
pub const QUERY_ID_PREFIX: &str = "q:";

pub fn query_embedding_id(qid: &str) -> String {
    format!("{QUERY_ID_PREFIX}{qid}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMode {
    Sparse,
    Dense,
    #[default]
    Hybrid,
}

impl FeatureMode {
    pub fn active(self) -> [bool; 2] {
        match self {
            FeatureMode::Sparse => [true, false],
            FeatureMode::Dense => [false, true],
            FeatureMode::Hybrid => [true, true],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Sparse => "sparse",
            FeatureMode::Dense => "dense",
            FeatureMode::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(FeatureMode::Sparse),
            "dense" => Ok(FeatureMode::Dense),
            "hybrid" => Ok(FeatureMode::Hybrid),
            _ => Err(Error::InvalidArgument(format!("unknown feature mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConfig {
    pub t_sparse: f64,
    pub t_dense: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            t_sparse: 100.0,
            t_dense: 10.0,
        }
    }
}

impl NormConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("t_sparse", self.t_sparse), ("t_dense", self.t_dense)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }

    fn temperature(&self, channel: usize) -> f64 {
        if channel == SPARSE {
            self.t_sparse
        } else {
            self.t_dense
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorStrategy {
    /// The first `L` passages of the list.
    Top,
    /// `L` distinct corpus passages drawn uniformly with the given seed.
    Random { seed: u64 },
}

impl AnchorStrategy {
    pub fn describe(&self) -> String {
        match self {
            AnchorStrategy::Top => "top".into(),
            AnchorStrategy::Random { seed } => format!("random:{seed}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet(Vec<String>);

impl AnchorSet {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("anchor set must not be empty".into()));
        }
        Ok(AnchorSet(ids))
    }

    pub fn ids(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn select_anchors(
    list: &[String],
    count: usize,
    strategy: AnchorStrategy,
    corpus_ids: &[String],
) -> Result<AnchorSet> {
    if count == 0 {
        return Err(Error::InvalidArgument("anchor count must be positive".into()));
    }
    match strategy {
        AnchorStrategy::Top => {
            if count > list.len() {
                return Err(Error::InvalidArgument(format!(
                    "requested {count} anchors from a list of {}",
                    list.len()
                )));
            }
            AnchorSet::new(list[..count].to_vec())
        }
        AnchorStrategy::Random { seed } => {
            if count > corpus_ids.len() {
                return Err(Error::InvalidArgument(format!(
                    "requested {count} random anchors from a corpus of {}",
                    corpus_ids.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picks = rand::seq::index::sample(&mut rng, corpus_ids.len(), count);
            AnchorSet::new(picks.into_iter().map(|i| corpus_ids[i].clone()).collect())
        }
    }
}

/// `(N+1) x L x 2` similarity tensor, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTensor {
    rows: usize,
    anchors: usize,
    values: Vec<f64>,
    active: [bool; 2],
}

impl SimTensor {
    pub fn zeros(rows: usize, anchors: usize, active: [bool; 2]) -> Self {
        SimTensor {
            rows,
            anchors,
            values: vec![0.0; rows * anchors * 2],
            active,
        }
    }

    pub fn from_values(rows: usize, anchors: usize, values: Vec<f64>, active: [bool; 2]) -> Result<Self> {
        if rows == 0 || anchors == 0 {
            return Err(Error::Shape("similarity tensor needs at least one row and one anchor".into()));
        }
        if values.len() != rows * anchors * 2 {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{anchors}x2 tensor",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("similarity entry {i}")));
        }
        let mut t = SimTensor {
            rows,
            anchors,
            values,
            active,
        };
        for c in 0..2 {
            if !active[c] {
                t.clear_channel(c);
            }
        }
        Ok(t)
    }

    /// Number of rows, `N + 1`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of passages, `N`.
    pub fn passages(&self) -> usize {
        self.rows - 1
    }

    pub fn anchors(&self) -> usize {
        self.anchors
    }

    pub fn active(&self) -> [bool; 2] {
        self.active
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn offset(&self, row: usize, anchor: usize, channel: usize) -> usize {
        (row * self.anchors + anchor) * 2 + channel
    }

    pub fn get(&self, row: usize, anchor: usize, channel: usize) -> f64 {
        self.values[self.offset(row, anchor, channel)]
    }

    pub fn set(&mut self, row: usize, anchor: usize, channel: usize, v: f64) {
        let o = self.offset(row, anchor, channel);
        self.values[o] = v;
    }

    pub fn channel_row(&self, row: usize, channel: usize) -> Vec<f64> {
        (0..self.anchors).map(|j| self.get(row, j, channel)).collect()
    }

    fn clear_channel(&mut self, channel: usize) {
        for v in self.values.iter_mut().skip(channel).step_by(2) {
            *v = 0.0;
        }
    }

    /// Reorders anchor columns: output column `j` is input column `perm[j]`.
    pub fn permute_anchors(&self, perm: &[usize]) -> SimTensor {
        let mut out = self.clone();
        for i in 0..self.rows {
            for (j, &src) in perm.iter().enumerate() {
                for c in 0..2 {
                    out.set(i, j, c, self.get(i, src, c));
                }
            }
        }
        out
    }

    /// Reorders passage rows (row 0 stays): output passage `k` is input
    /// passage `perm[k]` (both 0-based over passages).
    pub fn permute_passages(&self, perm: &[usize]) -> SimTensor {
        let mut out = self.clone();
        for (k, &src) in perm.iter().enumerate() {
            for j in 0..self.anchors {
                for c in 0..2 {
                    out.set(k + 1, j, c, self.get(src + 1, j, c));
                }
            }
        }
        out
    }
}

/// The query side of a feature build.
#[derive(Debug, Clone, Copy)]
pub struct QueryInput<'a> {
    pub id: &'a str,
    pub text: &'a str,
}

/// Similarity sources. The sparse index is required for sparse and hybrid
/// modes, the embedding store for dense and hybrid.
#[derive(Debug, Clone, Copy)]
pub struct Sources<'a> {
    pub index: Option<&'a TermIndex>,
    pub store: Option<&'a EmbeddingStore>,
}

impl<'a> Sources<'a> {
    fn index(&self) -> Result<&'a TermIndex> {
        self.index
            .ok_or_else(|| Error::InvalidArgument("sparse features need a term index".into()))
    }

    fn store(&self) -> Result<&'a EmbeddingStore> {
        self.store
            .ok_or_else(|| Error::InvalidArgument("dense features need an embedding store".into()))
    }
}

fn check_doc(index: &TermIndex, id: &str) -> Result<()> {
    if index.contains_doc(id) {
        Ok(())
    } else {
        Err(Error::UnknownId(id.to_string()))
    }
}

fn check_vec(store: &EmbeddingStore, id: &str) -> Result<()> {
    if store.contains(id) {
        Ok(())
    } else {
        Err(Error::UnknownId(id.to_string()))
    }
}

/// Raw similarities of the query and every passage to every anchor.
pub fn raw_similarities(
    query: QueryInput<'_>,
    passages: &[String],
    anchors: &AnchorSet,
    sources: Sources<'_>,
    mode: FeatureMode,
) -> Result<SimTensor> {
    let active = mode.active();
    let rows = passages.len() + 1;
    let l = anchors.len();
    let mut t = SimTensor::zeros(rows, l, active);

    if active[SPARSE] {
        let index = sources.index()?;
        let params = index.params();
        for a in anchors.ids() {
            check_doc(index, a)?;
        }
        let mut row_terms = Vec::with_capacity(rows);
        row_terms.push(index.query_terms(query.text));
        for p in passages {
            row_terms.push(index.doc_query_terms(p)?);
        }
        for (i, terms) in row_terms.iter().enumerate() {
            for (j, a) in anchors.ids().iter().enumerate() {
                t.set(i, j, SPARSE, index.score_terms(terms, a, &params)?);
            }
        }
    }
    if active[DENSE] {
        let store = sources.store()?;
        let qkey = query_embedding_id(query.id);
        check_vec(store, &qkey)?;
        for a in anchors.ids() {
            check_vec(store, a)?;
        }
        for p in passages {
            check_vec(store, p)?;
        }
        for (j, a) in anchors.ids().iter().enumerate() {
            t.set(0, j, DENSE, store.dense_score(&qkey, a)?);
            for (i, p) in passages.iter().enumerate() {
                t.set(i + 1, j, DENSE, store.dense_score(p, a)?);
            }
        }
    }
    Ok(t)
}

/// Query–passage similarities only, one column per passage row. Row 0 is left
/// at zero; this is the feature layout without passage collaboration.
pub fn raw_query_passage(
    query: QueryInput<'_>,
    passages: &[String],
    sources: Sources<'_>,
    mode: FeatureMode,
) -> Result<SimTensor> {
    let active = mode.active();
    let mut t = SimTensor::zeros(passages.len() + 1, 1, active);
    if active[SPARSE] {
        let index = sources.index()?;
        let params = index.params();
        let q = index.query_terms(query.text);
        for (i, p) in passages.iter().enumerate() {
            t.set(i + 1, 0, SPARSE, index.score_terms(&q, p, &params)?);
        }
    }
    if active[DENSE] {
        let store = sources.store()?;
        let qkey = query_embedding_id(query.id);
        for (i, p) in passages.iter().enumerate() {
            t.set(i + 1, 0, DENSE, store.dense_score(&qkey, p)?);
        }
    }
    Ok(t)
}

/// Temperature softmax followed by min-max scaling into `[-1, 1]`. A constant
/// input maps to all zeros.
pub fn normalize_channel(x: &[f64], t: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("cannot normalize an empty sequence".into()));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("input element {i}")));
    }
    let max_x = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| ((v - max_x) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let y: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.0; x.len()]);
    }
    let range = hi - lo;
    Ok(y.iter().map(|&v| 2.0 * (v - lo) / range - 1.0).collect())
}

/// Normalizes every row of every active channel independently.
pub fn build_features(raw: &SimTensor, cfg: &NormConfig) -> Result<SimTensor> {
    cfg.validate()?;
    let mut out = SimTensor::zeros(raw.rows, raw.anchors, raw.active);
    for c in 0..2 {
        if !raw.active[c] {
            continue;
        }
        for i in 0..raw.rows {
            let z = normalize_channel(&raw.channel_row(i, c), cfg.temperature(c))?;
            for (j, v) in z.into_iter().enumerate() {
                out.set(i, j, c, v);
            }
        }
    }
    Ok(out)
}

/// Normalization for the query–passage-only layout: each channel is
/// normalized down the passage column, since every row has a single entry.
pub fn build_query_passage_features(raw: &SimTensor, cfg: &NormConfig) -> Result<SimTensor> {
    cfg.validate()?;
    if raw.anchors != 1 {
        return Err(Error::Shape(format!("expected one column, found {}", raw.anchors)));
    }
    let mut out = SimTensor::zeros(raw.rows, 1, raw.active);
    for c in 0..2 {
        if !raw.active[c] || raw.rows < 2 {
            continue;
        }
        let col: Vec<f64> = (1..raw.rows).map(|i| raw.get(i, 0, c)).collect();
        for (k, v) in normalize_channel(&col, cfg.temperature(c))?.into_iter().enumerate() {
            out.set(k + 1, 0, c, v);
        }
    }
    Ok(out)
}

/// How the per-query features are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureLayout {
    /// Similarities to `L` anchor passages.
    #[default]
    Collaborative,
    /// A single column of query–passage similarities.
    QueryPassageOnly,
}

#[derive(Debug, Clone)]
pub struct FeatureOptions {
    pub anchors: Option<usize>,
    pub strategy: AnchorStrategy,
    pub mode: FeatureMode,
    pub norm: NormConfig,
    pub layout: FeatureLayout,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions {
            anchors: None,
            strategy: AnchorStrategy::Top,
            mode: FeatureMode::Hybrid,
            norm: NormConfig::default(),
            layout: FeatureLayout::Collaborative,
        }
    }
}

impl FeatureOptions {
    /// A stable description of everything that affects the normalized output.
    pub fn describe(&self) -> String {
        format!(
            "anchors={};strategy={};mode={};t_sparse={:016x};t_dense={:016x};layout={:?}",
            self.anchors.map_or("all".to_string(), |l| l.to_string()),
            self.strategy.describe(),
            self.mode.as_str(),
            self.norm.t_sparse.to_bits(),
            self.norm.t_dense.to_bits(),
            self.layout
        )
    }
}

/// Builds normalized features for one query. With a random strategy the seed
/// is mixed with the query id so each query draws its own anchors.
pub fn build_query_features(
    query: QueryInput<'_>,
    passages: &[String],
    sources: Sources<'_>,
    opts: &FeatureOptions,
) -> Result<(AnchorSet, SimTensor)> {
    if passages.is_empty() {
        return Err(Error::InvalidArgument(format!("query {} has an empty list", query.id)));
    }
    match opts.layout {
        FeatureLayout::QueryPassageOnly => {
            let raw = raw_query_passage(query, passages, sources, opts.mode)?;
            let feats = build_query_passage_features(&raw, &opts.norm)?;
            Ok((AnchorSet::new(vec![query_embedding_id(query.id)])?, feats))
        }
        FeatureLayout::Collaborative => {
            let count = opts.anchors.unwrap_or(passages.len());
            let strategy = match opts.strategy {
                AnchorStrategy::Top => AnchorStrategy::Top,
                AnchorStrategy::Random { seed } => AnchorStrategy::Random {
                    seed: seed ^ fnv1a(query.id.as_bytes()),
                },
            };
            let corpus_ids: &[String] = match (strategy, sources.index, sources.store) {
                (AnchorStrategy::Top, _, _) => &[],
                (_, Some(index), _) => index.doc_ids(),
                (_, None, Some(store)) => store.ids(),
                (_, None, None) => &[],
            };
            let anchors = select_anchors(passages, count, strategy, corpus_ids)?;
            let raw = raw_similarities(query, passages, &anchors, sources, opts.mode)?;
            let feats = build_features(&raw, &opts.norm)?;
            Ok((anchors, feats))
        }
    }
}

/// 64-bit FNV-1a, used for stable cache keys and seed mixing.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn cache_key(qid: &str, passages: &[String], opts: &FeatureOptions) -> u64 {
    let mut s = String::new();
    s.push_str(qid);
    s.push('\n');
    for p in passages {
        s.push_str(p);
        s.push('\n');
    }
    s.push_str(&opts.describe());
    fnv1a(s.as_bytes())
}

/// Normalized features for one query as persisted on disk.
///
/// Layout: magic, `N: u32`, `L: u32`, two channel-active bytes, `key: u64`,
/// `(N+1)*L*2` little-endian `f32` values, then the query id, anchor ids and
/// passage ids as length-prefixed strings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub qid: String,
    pub key: u64,
    pub anchors: AnchorSet,
    pub passages: Vec<String>,
    pub features: SimTensor,
}

impl FeatureCache {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        self.write_to(&mut w).expect("writing to a Vec cannot fail");
        w
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let f = &self.features;
        w.write_all(FEATURE_MAGIC)?;
        w.write_u32::<LittleEndian>(f.passages() as u32)?;
        w.write_u32::<LittleEndian>(f.anchors as u32)?;
        w.write_u8(f.active[SPARSE] as u8)?;
        w.write_u8(f.active[DENSE] as u8)?;
        w.write_u64::<LittleEndian>(self.key)?;
        for &v in &f.values {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        write_str(w, &self.qid)?;
        w.write_u32::<LittleEndian>(self.anchors.len() as u32)?;
        for a in self.anchors.ids() {
            write_str(w, a)?;
        }
        w.write_u32::<LittleEndian>(self.passages.len() as u32)?;
        for p in &self.passages {
            write_str(w, p)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> std::io::Result<Self> {
        use std::io::{Error as IoError, ErrorKind};
        let bad = |msg: String| IoError::new(ErrorKind::InvalidData, msg);
        let mut r = Cursor::new(bytes);
        expect_magic(&mut r, FEATURE_MAGIC)?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let l = r.read_u32::<LittleEndian>()? as usize;
        let active = [r.read_u8()? != 0, r.read_u8()? != 0];
        let key = r.read_u64::<LittleEndian>()?;
        let count = (n + 1) * l * 2;
        if count * 4 > bytes.len() {
            return Err(bad(format!("truncated feature block for {n}x{l}")));
        }
        let mut raw = vec![0f32; count];
        r.read_f32_into::<LittleEndian>(&mut raw)?;
        let features = SimTensor::from_values(n + 1, l, raw.into_iter().map(f64::from).collect(), active)
            .map_err(|e| bad(e.to_string()))?;
        let qid = read_str(&mut r)?;
        let na = r.read_u32::<LittleEndian>()? as usize;
        if na != l {
            return Err(bad(format!("{na} anchor ids for {l} columns")));
        }
        let anchors = (0..na).map(|_| read_str(&mut r)).collect::<std::io::Result<Vec<_>>>()?;
        let np = r.read_u32::<LittleEndian>()? as usize;
        if np != n {
            return Err(bad(format!("{np} passage ids for {n} rows")));
        }
        let passages = (0..np).map(|_| read_str(&mut r)).collect::<std::io::Result<Vec<_>>>()?;
        if r.position() as usize != bytes.len() {
            return Err(bad("trailing bytes after feature cache".into()));
        }
        Ok(FeatureCache {
            qid,
            key,
            anchors: AnchorSet::new(anchors).map_err(|e| bad(e.to_string()))?,
            passages,
            features,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        atomic_write(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes).map_err(|e| binary_err(path, e))
    }

    /// File name for a query's cache entry; characters outside
    /// `[A-Za-z0-9._-]` are percent-escaped.
    pub fn file_name(qid: &str) -> String {
        let mut s = String::with_capacity(qid.len() + 4);
        for b in qid.bytes() {
            if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || (b == b'.' && !s.is_empty()) {
                s.push(b as char);
            } else {
                s.push_str(&format!("%{b:02X}"));
            }
        }
        s.push_str(".fea");
        s
    }
}
