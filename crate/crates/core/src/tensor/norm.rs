use ndarray::{Array1, Array2, Axis, Zip};

use super::params::{Gradients, ParamStore, Params};
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub dim: usize,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let gain = format!("{prefix}.gain");
        let bias = format!("{prefix}.bias");
        store.add_constant(gain.clone(), &[dim], 1.0)?;
        store.add_constant(bias.clone(), &[dim], 0.0)?;
        Ok(LayerNorm { gain, bias, dim })
    }

    pub fn num_params(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, p: &Params, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *is = 1.0 / (var + LN_EPS).sqrt();
            let s = *is;
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &p.vector(&self.gain) + &p.vector(&self.bias);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &Params, cache: &LayerNormCache, dy: &Array2<f64>, g: &mut Gradients) -> Array2<f64> {
        {
            let mut dgain = g.vector_mut(&self.gain);
            dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
        }
        {
            let mut dbias = g.vector_mut(&self.bias);
            dbias += &dy.sum_axis(Axis(0));
        }
        let dxhat = dy * &p.vector(&self.gain);
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        Zip::from(dx.rows_mut())
            .and(dxhat.rows())
            .and(cache.xhat.rows())
            .and(&cache.inv_std)
            .for_each(|mut out, gh, xh, &is| {
                let sum_g = gh.sum();
                let sum_gx = gh.dot(&xh);
                Zip::from(&mut out).and(&gh).and(&xh).for_each(|o, &gv, &xv| {
                    *o = is / d * (d * gv - sum_g - xv * sum_gx);
                });
            });
        dx
    }
}
