//! Numeric core of a deterministic projected belief network (D-PBN)
//! auto-encoder with trainable compound activations (TCAs).
//!
//! The encoder is an ordinary feed-forward stack: per-coordinate TCAs
//! followed by dimension-reducing linear maps. The decoder backs up
//! through the same stack. At each layer it solves the saddle-point
//! equation `W' λ(W h) = z` for the conditional mean `λ(W h)` under the
//! maximum-entropy prior of the layer input range, then inverts the TCA
//! that produced that input.
//!
//! - [`maxent`]: the three canonical MaxEnt activations, derivatives and inverses
//! - [`tca`]: compound activations, their derivatives, inverses and parameter partials
//! - [`saddle`]: damped Newton solver for the saddle-point equation
//! - [`network`]: encode / decode / auto-encode and sampling efficiency
//! - [`training`]: reconstruction loss, implicit-differentiation gradients,
//!   finite-difference checker and optimizers
//! - [`baseline`]: conventional tied / untied auto-encoder for comparison
//!
//! The crate is `no_std` and only needs `alloc`.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod baseline;
mod error;
pub mod linalg;
pub mod maxent;
pub mod network;
pub mod optim;
mod roots;
pub mod saddle;
pub mod tca;
pub mod training;

pub use baseline::{AecAccumulator, AecGradients, AecNetwork, DecoderMode};
pub use error::{Error, Result};
pub use linalg::{Cholesky, Matrix};
pub use maxent::{gauss_cdf, gauss_pdf, MaxEntKind};
pub use network::{DecodeOutput, DecodePlan, DpbnNetwork, EncodeTrace, Layer, NetworkSpec};
pub use optim::{Optimizer, OptimizerKind};
pub use saddle::{solve_saddle, SaddleResult, SaddleSolver, SolverOptions};
pub use tca::{Tca, TcaLayer};
pub use training::{
    backward_gradients, batch_loss, finite_diff_check, finite_diff_compare, mse_loss, sample_gradient,
    BatchAccumulator, FailurePolicy, GradientSet, SampleGradient, TrainConfig,
};
