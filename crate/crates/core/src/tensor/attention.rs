//! Multi-head scaled dot-product attention over batches of equal-length
//! sequences. Inputs are `[batch * seq, dim]` with each sequence stored as
//! consecutive rows. There is no masking.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Zip};
use rand::Rng;

use super::linear::Linear;
use super::params::{Gradients, ParamStore, Params};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache {
    seq_len: usize,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    ctx: Array2<f64>,
    /// `[batch, heads, seq, seq]` row-stochastic attention weights.
    probs: Vec<f64>,
}

impl AttentionCache {
    /// Attention weights of sequence `b`, head `h`, as a `seq x seq` slice.
    pub fn weights(&self, b: usize, h: usize, heads: usize) -> &[f64] {
        let s = self.seq_len;
        let start = (b * heads + h) * s * s;
        &self.probs[start..start + s * s]
    }
}

impl MultiHeadAttention {
    pub fn register<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::register(store, &format!("{prefix}.query"), dim, dim, true, rng)?,
            key: Linear::register(store, &format!("{prefix}.key"), dim, dim, true, rng)?,
            value: Linear::register(store, &format!("{prefix}.value"), dim, dim, true, rng)?,
            output: Linear::register(store, &format!("{prefix}.output"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        4 * Linear::num_params(dim, dim, true)
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(
        &self,
        p: &Params,
        xq: &Array2<f64>,
        xk: &Array2<f64>,
        xv: &Array2<f64>,
        seq_len: usize,
    ) -> Result<(Array2<f64>, AttentionCache)> {
        let rows = xq.nrows();
        if seq_len == 0 || rows % seq_len != 0 || xk.nrows() != rows || xv.nrows() != rows {
            return Err(Error::Shape(format!(
                "attention inputs of {rows}/{}/{} rows do not split into sequences of {seq_len}",
                xk.nrows(),
                xv.nrows()
            )));
        }
        let q = self.query.forward(p, xq)?;
        let k = self.key.forward(p, xk)?;
        let v = self.value.forward(p, xv)?;
        let batch = rows / seq_len;
        let (d, hd, s) = (self.dim, self.head_dim(), seq_len);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; batch * self.heads * s * s];
        let mut ctx = Array2::<f64>::zeros((rows, d));
        for b in 0..batch {
            for h in 0..self.heads {
                let (r, c) = (b * s..(b + 1) * s, h * hd..(h + 1) * hd);
                let start = (b * self.heads + h) * s * s;
                let mut pm = ArrayViewMut2::from_shape((s, s), &mut probs[start..start + s * s]).expect("square block");
                general_mat_mul(
                    scale,
                    &q.slice(s![r.clone(), c.clone()]),
                    &k.slice(s![r.clone(), c.clone()]).t(),
                    0.0,
                    &mut pm,
                );
                for mut row in pm.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                general_mat_mul(1.0, &pm, &v.slice(s![r.clone(), c.clone()]), 0.0, &mut ctx.slice_mut(s![r, c]));
            }
        }
        let out = self.output.forward(p, &ctx)?;
        Ok((
            out,
            AttentionCache {
                seq_len,
                q,
                k,
                v,
                ctx,
                probs,
            },
        ))
    }

    pub fn forward_self(&self, p: &Params, x: &Array2<f64>, seq_len: usize) -> Result<(Array2<f64>, AttentionCache)> {
        self.forward(p, x, x, x, seq_len)
    }

    /// Returns the gradients for the query, key and value inputs.
    pub fn backward(
        &self,
        p: &Params,
        xq: &Array2<f64>,
        xk: &Array2<f64>,
        xv: &Array2<f64>,
        cache: &AttentionCache,
        dout: &Array2<f64>,
        g: &mut Gradients,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let dctx = self.output.backward(p, &cache.ctx, dout, g);
        let rows = dctx.nrows();
        let s = cache.seq_len;
        let batch = rows / s;
        let (d, hd) = (self.dim, self.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Array2::<f64>::zeros((rows, d));
        let mut dk = Array2::<f64>::zeros((rows, d));
        let mut dv = Array2::<f64>::zeros((rows, d));
        let mut dscore = Array2::<f64>::zeros((s, s));
        for b in 0..batch {
            for h in 0..self.heads {
                let (r, c) = (b * s..(b + 1) * s, h * hd..(h + 1) * hd);
                let start = (b * self.heads + h) * s * s;
                let pm = ArrayView2::from_shape((s, s), &cache.probs[start..start + s * s]).expect("square block");
                let dch = dctx.slice(s![r.clone(), c.clone()]);
                general_mat_mul(1.0, &pm.t(), &dch, 0.0, &mut dv.slice_mut(s![r.clone(), c.clone()]));
                general_mat_mul(1.0, &dch, &cache.v.slice(s![r.clone(), c.clone()]).t(), 0.0, &mut dscore);
                // softmax backward: p * (dp - sum_j p_j dp_j)
                Zip::from(dscore.rows_mut()).and(pm.rows()).for_each(|mut dp, pr| {
                    let weighted = dp.dot(&pr);
                    Zip::from(&mut dp).and(&pr).for_each(|x, &pv| *x = pv * (*x - weighted) * scale);
                });
                general_mat_mul(
                    1.0,
                    &dscore,
                    &cache.k.slice(s![r.clone(), c.clone()]),
                    0.0,
                    &mut dq.slice_mut(s![r.clone(), c.clone()]),
                );
                general_mat_mul(
                    1.0,
                    &dscore.t(),
                    &cache.q.slice(s![r.clone(), c.clone()]),
                    0.0,
                    &mut dk.slice_mut(s![r, c]),
                );
            }
        }
        let dxq = self.query.backward(p, xq, &dq, g);
        let dxk = self.key.backward(p, xk, &dk, g);
        let dxv = self.value.backward(p, xv, &dv, g);
        (dxq, dxk, dxv)
    }

    pub fn backward_self(
        &self,
        p: &Params,
        x: &Array2<f64>,
        cache: &AttentionCache,
        dout: &Array2<f64>,
        g: &mut Gradients,
    ) -> Array2<f64> {
        let (a, b, c) = self.backward(p, x, x, x, cache, dout, g);
        a + b + c
    }
}
