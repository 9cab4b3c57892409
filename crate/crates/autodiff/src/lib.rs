//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records operations as they are evaluated; [`Tape::backward`]
//! sweeps it once in reverse to produce [`Gradients`]. The operation set is
//! what Gaussian state-space objectives need: affine algebra, pointwise
//! nonlinearities, Cholesky factors, triangular solves and log-determinants.

mod error;
pub mod gradcheck;
mod mlp;
mod ops;
mod tape;

pub use error::{AdError, Result};
pub use mlp::{mlp_apply, Activation, BoundMlp, Layer, MlpParams};
pub use tape::{Gradients, Matrix, Tape, Var};
