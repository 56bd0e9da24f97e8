//! The reranking model.
//!
//! Each row of the similarity tensor (query, then passages) is a sequence of
//! `L` two-channel similarity vectors. They are projected to `D` dimensions
//! without bias, refined column by column with the interaction encoder (one
//! sequence per anchor, running down the query+passage axis, with rank
//! position embeddings), then each row is pooled by prepending a `[CLS]`
//! vector and running the aggregation encoder along the anchor axis. A
//! passage's score is the dot product of its pooled vector with the query's.
//!
//! Cost per query is `O(N²L + NL²)`: attention is applied along one axis at a
//! time rather than over all `N·L` cells jointly.

use std::io::{Cursor, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::RunEntry;
use crate::error::{Error, Result};
use crate::features::SimTensor;
use crate::io_util::{atomic_write, binary_err, expect_magic, read_file, read_str, write_str};
use crate::tensor::{
    Activation, Encoder, Gradients, LayerShape, ParamStore, Params, Tensor, TransformerCache, TransformerLayer,
    INIT_STD,
};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HYBCKP1\0";

const PROJ: &str = "proj.w";
const POS: &str = "pos";
const CLS: &str = "cls";
const CLS_QUERY: &str = "cls_query";
const QUERY_TOKEN: &str = "query_token";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub inner: usize,
    pub heads: usize,
    pub layers_inter: usize,
    pub layers_aggr: usize,
    /// Size of the rank position table; lists need `N + 1 <= max_rank`.
    pub max_rank: usize,
    pub use_interaction: bool,
    pub use_query_row: bool,
    pub use_positions: bool,
    /// Sparse and dense channel switches; an inactive channel is zeroed
    /// before projection.
    pub channels: [bool; 2],
    /// Separate `[CLS]` vectors for the query row and passage rows.
    pub separate_cls: bool,
    pub activation: Activation,
    pub pre_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            inner: 256,
            heads: 8,
            layers_inter: 2,
            layers_aggr: 1,
            max_rank: 101,
            use_interaction: true,
            use_query_row: true,
            use_positions: true,
            channels: [true, true],
            separate_cls: false,
            activation: Activation::Gelu,
            pre_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.inner == 0 || self.heads == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.layers_aggr == 0 {
            return Err(Error::InvalidArgument("aggregation needs at least one layer".into()));
        }
        if self.use_interaction && self.layers_inter == 0 {
            return Err(Error::InvalidArgument("interaction enabled with zero layers".into()));
        }
        if self.uses_positions() && self.max_rank == 0 {
            return Err(Error::InvalidArgument("max_rank must be positive".into()));
        }
        Ok(())
    }

    fn uses_positions(&self) -> bool {
        self.use_interaction && self.use_positions
    }

    fn layer_shape(&self) -> LayerShape {
        LayerShape {
            dim: self.dim,
            inner: self.inner,
            heads: self.heads,
            activation: self.activation,
            pre_norm: self.pre_norm,
        }
    }
}

/// Exact number of trainable scalars for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    let d = config.dim;
    let layer = TransformerLayer::num_params(d, config.inner);
    let mut n = 2 * d + d + config.layers_aggr * layer;
    if config.use_interaction {
        n += config.layers_inter * layer;
        if config.use_positions {
            n += config.max_rank * d;
        }
    }
    if config.separate_cls && config.use_query_row {
        n += d;
    }
    if !config.use_query_row {
        n += d;
    }
    n
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub struct ForwardCache {
    /// Rows fed to the encoders (`N + 1`, or `N` without the query row).
    rows: usize,
    /// Tensor row index of the first encoded row.
    offset: usize,
    anchors: usize,
    x: Array2<f64>,
    inter: Option<Vec<TransformerCache>>,
    aggr: Vec<TransformerCache>,
    /// Pooled `[CLS]` vector per encoded row.
    pooled: Array2<f64>,
    query: Array1<f64>,
    pub scores: Vec<f64>,
}

impl ForwardCache {
    pub fn query_vector(&self) -> &Array1<f64> {
        &self.query
    }

    /// Pooled representation of each passage, in list order.
    pub fn passage_vectors(&self) -> ArrayView2<'_, f64> {
        self.pooled.slice(s![1 - self.offset.., ..])
    }
}

#[derive(Debug, Clone)]
pub struct HybRank {
    config: ModelConfig,
    params: ParamStore,
    inter: Option<Encoder>,
    aggr: Encoder,
}

impl HybRank {
    /// Randomly initialized model: N(0, 0.02²) for weights and embeddings,
    /// zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.dim;
        params.add_normal(PROJ, &[2, d], INIT_STD, &mut rng)?;
        if config.uses_positions() {
            params.add_normal(POS, &[config.max_rank, d], INIT_STD, &mut rng)?;
        }
        params.add_normal(CLS, &[1, d], INIT_STD, &mut rng)?;
        if config.separate_cls && config.use_query_row {
            params.add_normal(CLS_QUERY, &[1, d], INIT_STD, &mut rng)?;
        }
        if !config.use_query_row {
            params.add_normal(QUERY_TOKEN, &[1, d], INIT_STD, &mut rng)?;
        }
        let shape = config.layer_shape();
        let inter = if config.use_interaction {
            Some(Encoder::register(&mut params, "inter", config.layers_inter, shape, &mut rng)?)
        } else {
            None
        };
        let aggr = Encoder::register(&mut params, "aggr", config.layers_aggr, shape, &mut rng)?;
        Ok(HybRank {
            config,
            params,
            inter,
            aggr,
        })
    }

    /// Rebuilds a model around existing parameter values, checking that the
    /// names and shapes match what `config` expects.
    pub fn from_params(config: ModelConfig, values: Params) -> Result<Self> {
        let template = HybRank::new(config, 0)?;
        let expected: Vec<(&str, &[usize])> = template.params.values.iter().map(|(k, t)| (k, t.shape())).collect();
        let found: Vec<(&str, &[usize])> = values.iter().map(|(k, t)| (k, t.shape())).collect();
        if expected != found {
            let missing = expected.iter().find(|e| !found.contains(e));
            let extra = found.iter().find(|f| !expected.contains(f));
            return Err(Error::Shape(format!(
                "parameters do not match the configuration (expected {missing:?}, unexpected {extra:?})"
            )));
        }
        Ok(HybRank {
            params: ParamStore::from_values(values),
            ..template
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_features(&self, feats: &SimTensor) -> Result<()> {
        if feats.passages() == 0 {
            return Err(Error::Shape("feature tensor has no passages".into()));
        }
        if self.config.uses_positions() && feats.rows() > self.config.max_rank {
            return Err(Error::InvalidArgument(format!(
                "list of {} passages needs {} rank positions, table has {}",
                feats.passages(),
                feats.rows(),
                self.config.max_rank
            )));
        }
        Ok(())
    }

    /// `[rows * L, 2]` input with inactive channels zeroed.
    fn input_matrix(&self, feats: &SimTensor, offset: usize) -> Array2<f64> {
        let rows = feats.rows() - offset;
        let l = feats.anchors();
        let mask = self.config.channels;
        let mut x = Array2::zeros((rows * l, 2));
        for r in 0..rows {
            for j in 0..l {
                for c in 0..2 {
                    if mask[c] {
                        x[[r * l + j, c]] = feats.get(r + offset, j, c);
                    }
                }
            }
        }
        x
    }

    fn project_matrix(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.params.values.matrix(PROJ))
    }

    /// Rows ordered `r * L + j` in, `j * R + r` out (plus positions).
    fn to_columns(&self, e: &Array2<f64>, rows: usize, l: usize, offset: usize) -> Array2<f64> {
        let d = self.config.dim;
        let mut z = Array2::zeros((rows * l, d));
        let pos = self
            .config
            .use_positions
            .then(|| self.params.values.matrix(POS));
        for r in 0..rows {
            for j in 0..l {
                let mut dst = z.row_mut(j * rows + r);
                dst.assign(&e.row(r * l + j));
                if let Some(pos) = &pos {
                    dst += &pos.row(r + offset);
                }
            }
        }
        z
    }

    fn from_columns(z: &Array2<f64>, rows: usize, l: usize) -> Array2<f64> {
        let mut e = Array2::zeros(z.raw_dim());
        for r in 0..rows {
            for j in 0..l {
                e.row_mut(r * l + j).assign(&z.row(j * rows + r));
            }
        }
        e
    }

    fn interact_matrix(
        &self,
        e: Array2<f64>,
        rows: usize,
        l: usize,
        offset: usize,
    ) -> Result<(Array2<f64>, Option<Vec<TransformerCache>>)> {
        match &self.inter {
            None => Ok((e, None)),
            Some(enc) => {
                if self.config.use_positions && rows + offset > self.config.max_rank {
                    return Err(Error::InvalidArgument(format!(
                        "{} rows exceed the rank table of {}",
                        rows + offset,
                        self.config.max_rank
                    )));
                }
                let z = self.to_columns(&e, rows, l, offset);
                let (z, caches) = enc.forward(&self.params.values, z, rows)?;
                Ok((Self::from_columns(&z, rows, l), Some(caches)))
            }
        }
    }

    fn cls_for_row(&self, r: usize, offset: usize) -> ArrayView2<'_, f64> {
        if r == 0 && offset == 0 && self.config.separate_cls {
            self.params.values.matrix(CLS_QUERY)
        } else {
            self.params.values.matrix(CLS)
        }
    }

    fn aggregate_matrix(
        &self,
        e: &Array2<f64>,
        rows: usize,
        l: usize,
        offset: usize,
    ) -> Result<(Array2<f64>, Vec<TransformerCache>)> {
        let d = self.config.dim;
        let seq = l + 1;
        let mut a = Array2::zeros((rows * seq, d));
        for r in 0..rows {
            a.row_mut(r * seq).assign(&self.cls_for_row(r, offset).row(0));
            a.slice_mut(s![r * seq + 1..(r + 1) * seq, ..])
                .assign(&e.slice(s![r * l..(r + 1) * l, ..]));
        }
        let (out, caches) = self.aggr.forward(&self.params.values, a, seq)?;
        let pooled = out.select(Axis(0), &(0..rows).map(|r| r * seq).collect::<Vec<_>>());
        Ok((pooled, caches))
    }

    /// Projects every two-channel similarity vector to `D` dimensions.
    /// Returns `[N+1, L, D]`.
    pub fn project(&self, feats: &SimTensor) -> Result<Array3<f64>> {
        let x = self.input_matrix(feats, 0);
        let e = self.project_matrix(&x);
        e.into_shape_with_order((feats.rows(), feats.anchors(), self.config.dim))
            .map_err(|e| Error::Shape(e.to_string()))
    }

    /// Column-wise interaction over `[rows, L, D]` embeddings; row `r` gets
    /// rank position `r`. Identity when interaction is disabled.
    pub fn interact(&self, emb: &Array3<f64>) -> Result<Array3<f64>> {
        let (rows, l, d) = emb.dim();
        if d != self.config.dim {
            return Err(Error::Shape(format!("embedding width {d}, model dim {}", self.config.dim)));
        }
        let e = emb
            .to_owned()
            .into_shape_with_order((rows * l, d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (out, _) = self.interact_matrix(e, rows, l, 0)?;
        out.into_shape_with_order((rows, l, d))
            .map_err(|e| Error::Shape(e.to_string()))
    }

    /// Pools each row of `[rows, L, D]` through the aggregation encoder and
    /// returns the `[CLS]` outputs, `[rows, D]`.
    pub fn aggregate(&self, emb: &Array3<f64>) -> Result<Array2<f64>> {
        let (rows, l, d) = emb.dim();
        if d != self.config.dim || l == 0 {
            return Err(Error::Shape(format!("cannot aggregate a {rows}x{l}x{d} tensor")));
        }
        let e = emb
            .to_owned()
            .into_shape_with_order((rows * l, d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.aggregate_matrix(&e, rows, l, 0)?.0)
    }

    /// Pools one passage-row sequence `[L, D]` with the passage `[CLS]`.
    pub fn aggregate_row(&self, seq: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let (l, d) = seq.dim();
        let emb = seq
            .to_owned()
            .into_shape_with_order((1, l, d))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let e = emb.into_shape_with_order((l, d)).map_err(|e| Error::Shape(e.to_string()))?;
        let (pooled, _) = self.aggregate_matrix(&e, 1, l, 1)?;
        Ok(pooled.row(0).to_owned())
    }

    /// Full forward pass, keeping what the backward pass needs.
    pub fn forward(&self, feats: &SimTensor) -> Result<ForwardCache> {
        self.check_features(feats)?;
        let offset = usize::from(!self.config.use_query_row);
        let rows = feats.rows() - offset;
        let l = feats.anchors();
        let x = self.input_matrix(feats, offset);
        let e = self.project_matrix(&x);
        let (e, inter) = self.interact_matrix(e, rows, l, offset)?;
        let (pooled, aggr) = self.aggregate_matrix(&e, rows, l, offset)?;
        let query = if self.config.use_query_row {
            pooled.row(0).to_owned()
        } else {
            self.params.values.matrix(QUERY_TOKEN).row(0).to_owned()
        };
        let passages = pooled.slice(s![1 - offset.., ..]);
        let scores = passages.dot(&query).to_vec();
        Ok(ForwardCache {
            rows,
            offset,
            anchors: l,
            x,
            inter,
            aggr,
            pooled,
            query,
            scores,
        })
    }

    /// Relevance score of every passage, in list order.
    pub fn score_all(&self, feats: &SimTensor) -> Result<Vec<f64>> {
        Ok(self.forward(feats)?.scores)
    }

    /// Accumulates `d loss / d params` given `d loss / d scores`.
    pub fn backward(&self, cache: &ForwardCache, dscores: &[f64], g: &mut Gradients) -> Result<()> {
        let (rows, offset, l) = (cache.rows, cache.offset, cache.anchors);
        let n = cache.scores.len();
        if dscores.len() != n {
            return Err(Error::Shape(format!("{} score gradients for {n} scores", dscores.len())));
        }
        let d = self.config.dim;
        let p = &self.params.values;
        let ds = Array1::from(dscores.to_vec());
        let first = 1 - offset;
        let passages = cache.pooled.slice(s![first.., ..]);

        let mut dpooled = Array2::<f64>::zeros((rows, d));
        // s_i = q . h_i
        let dquery = passages.t().dot(&ds);
        for (i, &dsi) in dscores.iter().enumerate() {
            dpooled.row_mut(first + i).scaled_add(dsi, &cache.query);
        }
        if self.config.use_query_row {
            let mut row0 = dpooled.row_mut(0);
            row0 += &dquery;
        } else {
            let mut gq = g.matrix_mut(QUERY_TOKEN);
            let mut row = gq.row_mut(0);
            row += &dquery;
        }

        let seq = l + 1;
        let mut dout = Array2::<f64>::zeros((rows * seq, d));
        for r in 0..rows {
            dout.row_mut(r * seq).assign(&dpooled.row(r));
        }
        let da = self.aggr.backward(p, &cache.aggr, dout, g);
        let mut de = Array2::<f64>::zeros((rows * l, d));
        for r in 0..rows {
            let cls_name = if r == 0 && offset == 0 && self.config.separate_cls {
                CLS_QUERY
            } else {
                CLS
            };
            {
                let mut gc = g.matrix_mut(cls_name);
                let mut row = gc.row_mut(0);
                row += &da.row(r * seq);
            }
            de.slice_mut(s![r * l..(r + 1) * l, ..])
                .assign(&da.slice(s![r * seq + 1..(r + 1) * seq, ..]));
        }

        if let (Some(enc), Some(caches)) = (&self.inter, &cache.inter) {
            let mut dz = Array2::<f64>::zeros((rows * l, d));
            for r in 0..rows {
                for j in 0..l {
                    dz.row_mut(j * rows + r).assign(&de.row(r * l + j));
                }
            }
            let dz = enc.backward(p, caches, dz, g);
            if self.config.use_positions {
                let mut gpos = g.matrix_mut(POS);
                for r in 0..rows {
                    let mut row = gpos.row_mut(r + offset);
                    for j in 0..l {
                        row += &dz.row(j * rows + r);
                    }
                }
            }
            de = Self::from_columns(&dz, rows, l);
        }

        let mut gw = g.matrix_mut(PROJ);
        ndarray::linalg::general_mat_mul(1.0, &cache.x.t(), &de, 1.0, &mut gw);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = serde_json::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        let mut w = Vec::new();
        w.write_all(CHECKPOINT_MAGIC).expect("vec write");
        write_str(&mut w, &cfg).expect("vec write");
        self.params.values.write_to(&mut w).expect("vec write");
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::io::Result<Self> {
        use std::io::{Error as IoError, ErrorKind};
        let bad = |msg: String| IoError::new(ErrorKind::InvalidData, msg);
        let mut r = Cursor::new(bytes);
        expect_magic(&mut r, CHECKPOINT_MAGIC)?;
        let cfg = read_str(&mut r)?;
        let config: ModelConfig = serde_json::from_str(&cfg).map_err(|e| bad(format!("bad config: {e}")))?;
        let values = Params::read_from(&mut r)?;
        if r.position() as usize != bytes.len() {
            return Err(bad("trailing bytes after checkpoint".into()));
        }
        HybRank::from_params(config, values).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        atomic_write(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes).map_err(|e| binary_err(path, e))
    }

    /// Overwrites one named parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .values
            .get_mut(name)
            .ok_or_else(|| Error::UnknownId(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: shape {:?} does not match {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn param_matrix(&self, name: &str) -> Option<Array2<f64>> {
        self.params
            .values
            .get(name)
            .and_then(|t| t.clone().into_dimensionality::<Ix2>().ok())
    }
}

/// Reorders a candidate list by descending score. The sort is stable, so
/// ties keep the original rank order.
pub fn rerank(list: &[String], scores: &[f64]) -> Result<Vec<RunEntry>> {
    if list.len() != scores.len() {
        return Err(Error::Shape(format!("{} scores for {} passages", scores.len(), list.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score of {}", list[i])));
    }
    let mut out: Vec<RunEntry> = list
        .iter()
        .zip(scores)
        .map(|(id, &s)| RunEntry::new(id.clone(), s))
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}
