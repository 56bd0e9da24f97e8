use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis};
use rand::Rng;

use super::params::{Gradients, ParamStore, Params};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

/// Affine map `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `{prefix}.w` (and `{prefix}.b` when `bias`) with N(0, 0.02²)
    /// weights and a zero bias.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = format!("{prefix}.w");
        store.add_normal(weight.clone(), &[in_dim, out_dim], INIT_STD, rng)?;
        let bias = if bias {
            let b = format!("{prefix}.b");
            store.add_constant(b.clone(), &[out_dim], 0.0)?;
            Some(b)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn num_params(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }

    pub fn forward(&self, p: &Params, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim {
            return Err(Error::Shape(format!(
                "{}: input has {} features, expected {}",
                self.weight,
                x.ncols(),
                self.in_dim
            )));
        }
        let mut y = x.dot(&p.matrix(&self.weight));
        if let Some(b) = &self.bias {
            y += &p.vector(b);
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, p: &Params, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Gradients) -> Array2<f64> {
        {
            let mut dw = g.matrix_mut(&self.weight);
            general_mat_mul(1.0, &x.t(), dy, 1.0, &mut dw);
        }
        if let Some(b) = &self.bias {
            let mut db = g.vector_mut(b);
            db += &dy.sum_axis(Axis(0));
        }
        dy.dot(&p.matrix(&self.weight).t())
    }
}
