use ndarray::{Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionCache, MultiHeadAttention};
use super::linear::Linear;
use super::norm::{LayerNorm, LayerNormCache};
use super::params::{Gradients, ParamStore, Params};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Exact GELU, `x * Φ(x)`.
    #[default]
    Gelu,
    Relu,
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
                cdf + x * pdf
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub dim: usize,
    pub inner: usize,
    pub heads: usize,
    pub activation: Activation,
    pub pre_norm: bool,
}

/// One encoder block. Post-norm by default:
/// `x' = LN(x + MHA(x))`, `out = LN(x' + FFN(x'))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
    pub activation: Activation,
    pub pre_norm: bool,
}

pub struct TransformerCache {
    /// Input that fed the attention block (x, or LN1(x) when pre-norm).
    attn_in: Array2<f64>,
    attn: AttentionCache,
    ln1: LayerNormCache,
    /// Input that fed the feed-forward block.
    ff_in: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    ln2: LayerNormCache,
}

impl TransformerCache {
    pub fn attention(&self) -> &AttentionCache {
        &self.attn
    }
}

impl TransformerLayer {
    pub fn register<R: Rng>(store: &mut ParamStore, prefix: &str, shape: LayerShape, rng: &mut R) -> Result<Self> {
        Ok(TransformerLayer {
            attn: MultiHeadAttention::register(store, &format!("{prefix}.attn"), shape.dim, shape.heads, rng)?,
            norm1: LayerNorm::register(store, &format!("{prefix}.norm1"), shape.dim)?,
            ff_in: Linear::register(store, &format!("{prefix}.ff_in"), shape.dim, shape.inner, true, rng)?,
            ff_out: Linear::register(store, &format!("{prefix}.ff_out"), shape.inner, shape.dim, true, rng)?,
            norm2: LayerNorm::register(store, &format!("{prefix}.norm2"), shape.dim)?,
            activation: shape.activation,
            pre_norm: shape.pre_norm,
        })
    }

    pub fn num_params(dim: usize, inner: usize) -> usize {
        MultiHeadAttention::num_params(dim)
            + Linear::num_params(dim, inner, true)
            + Linear::num_params(inner, dim, true)
            + 2 * LayerNorm::num_params(dim)
    }

    fn feed_forward(&self, p: &Params, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        let hidden_pre = self.ff_in.forward(p, x)?;
        let act = self.activation;
        let hidden = hidden_pre.mapv(|v| act.apply(v));
        let out = self.ff_out.forward(p, &hidden)?;
        Ok((out, hidden_pre, hidden))
    }

    fn feed_forward_backward(&self, p: &Params, cache: &TransformerCache, dy: &Array2<f64>, g: &mut Gradients) -> Array2<f64> {
        let mut dh = self.ff_out.backward(p, &cache.hidden, dy, g);
        let act = self.activation;
        Zip::from(&mut dh)
            .and(&cache.hidden_pre)
            .for_each(|d, &x| *d *= act.derivative(x));
        self.ff_in.backward(p, &cache.ff_in, &dh, g)
    }

    pub fn forward(&self, p: &Params, x: &Array2<f64>, seq_len: usize) -> Result<(Array2<f64>, TransformerCache)> {
        if self.pre_norm {
            let (n1, ln1) = self.norm1.forward(p, x);
            let (a, attn) = self.attn.forward_self(p, &n1, seq_len)?;
            let x1 = x + &a;
            let (n2, ln2) = self.norm2.forward(p, &x1);
            let (f, hidden_pre, hidden) = self.feed_forward(p, &n2)?;
            let out = x1 + &f;
            Ok((
                out,
                TransformerCache {
                    attn_in: n1,
                    attn,
                    ln1,
                    ff_in: n2,
                    hidden_pre,
                    hidden,
                    ln2,
                },
            ))
        } else {
            let (a, attn) = self.attn.forward_self(p, x, seq_len)?;
            let (x1, ln1) = self.norm1.forward(p, &(x + &a));
            let (f, hidden_pre, hidden) = self.feed_forward(p, &x1)?;
            let (out, ln2) = self.norm2.forward(p, &(&x1 + &f));
            Ok((
                out,
                TransformerCache {
                    attn_in: x.clone(),
                    attn,
                    ln1,
                    ff_in: x1,
                    hidden_pre,
                    hidden,
                    ln2,
                },
            ))
        }
    }

    pub fn backward(&self, p: &Params, cache: &TransformerCache, dout: &Array2<f64>, g: &mut Gradients) -> Array2<f64> {
        if self.pre_norm {
            let dn2 = self.feed_forward_backward(p, cache, dout, g);
            let dx1 = dout + &self.norm2.backward(p, &cache.ln2, &dn2, g);
            let dn1 = self.attn.backward_self(p, &cache.attn_in, &cache.attn, &dx1, g);
            dx1 + &self.norm1.backward(p, &cache.ln1, &dn1, g)
        } else {
            let dr2 = self.norm2.backward(p, &cache.ln2, dout, g);
            let dx1 = &dr2 + &self.feed_forward_backward(p, cache, &dr2, g);
            let dr1 = self.norm1.backward(p, &cache.ln1, &dx1, g);
            let dx_attn = self.attn.backward_self(p, &cache.attn_in, &cache.attn, &dr1, g);
            dr1 + &dx_attn
        }
    }
}

/// A stack of encoder layers applied to batches of equal-length sequences.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<TransformerLayer>,
}

impl Encoder {
    pub fn register<R: Rng>(store: &mut ParamStore, prefix: &str, n_layers: usize, shape: LayerShape, rng: &mut R) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| TransformerLayer::register(store, &format!("{prefix}.{i}"), shape, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder { layers })
    }

    pub fn forward(&self, p: &Params, x: Array2<f64>, seq_len: usize) -> Result<(Array2<f64>, Vec<TransformerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let (out, cache) = layer.forward(p, &h, seq_len)?;
            caches.push(cache);
            h = out;
        }
        Ok((h, caches))
    }

    pub fn backward(&self, p: &Params, caches: &[TransformerCache], dout: Array2<f64>, g: &mut Gradients) -> Array2<f64> {
        let mut d = dout;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            d = layer.backward(p, cache, &d, g);
        }
        d
    }
}
