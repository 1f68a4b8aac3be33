//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! The crate carries exactly what a small decoder-only transformer needs:
//! embeddings (row gathers), layer norm, masked multi-head attention,
//! feed-forward blocks, a GRU cell, softmax cross-entropy and AdamW.
//! Everything is generic over [`Scalar`], so the same model code runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.
//!
//! ```
//! use nmt_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.input(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod opcheck;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, weighted_sum, GradCheckOptions, GradCheckReport};
pub use graph::{log_sum_exp, softmax_in_place, Gradients, Graph, Var};
pub use nn::{AttnMask, FeedForward, GruCell, LayerNorm, Linear, MultiHeadAttention};
pub use optim::{adamw_step, clip_global_norm, AdamW, AdamWConfig, StepOutcome};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
