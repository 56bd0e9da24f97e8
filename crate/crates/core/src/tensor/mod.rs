//! Differentiable building blocks with hand-written backward passes.
//!
//! Activations are `[rows, dim]` matrices in double precision. Sequence ops
//! take a batch of equal-length sequences stacked row-wise plus the sequence
//! length. Every backward pass accumulates into a [`Gradients`] map keyed like
//! the [`Params`] it read from.

pub mod attention;
pub mod gradcheck;
pub mod linear;
pub mod norm;
pub mod params;
pub mod transformer;

pub use attention::{AttentionCache, MultiHeadAttention};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use linear::{Linear, INIT_STD};
pub use norm::{LayerNorm, LN_EPS};
pub use params::{Gradients, ParamStore, Params};
pub use transformer::{Activation, Encoder, LayerShape, TransformerCache, TransformerLayer};

/// Dynamically shaped parameter tensor.
pub type Tensor = ndarray::ArrayD<f64>;
