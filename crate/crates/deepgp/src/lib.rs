//! Deep Gaussian process learning with collapsed variational bounds.
//!
//! The model stacks GP layers with inducing-point sparsification; the
//! variational posterior over each layer's latents is a diagonal Gaussian
//! whose means are reparameterized by an MLP recognition network (or held
//! as explicit parameters). Every data-dependent term of the bound is a
//! fixed-size sum over datapoints, so evaluation and gradients distribute
//! over row shards — see [`executor`] and the worker [`protocol`].
//!
//! The numeric core is generic over the scalar type ([`scalar::Real`]:
//! `f32` or `f64`); the aliases below pin the `f64` instantiations that
//! the CLI and file formats use.

pub mod bo;
pub mod bound;
pub mod checkpoint;
pub mod error;
pub mod executor;
pub mod infer;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod mlp;
pub mod model;
pub mod posterior;
pub mod protocol;
pub mod psi;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

/// `f64` instantiations of the main types.
pub type KernelSpec = kernel::KernelSpec<f64>;
pub type DiagGaussianPosterior = posterior::DiagGaussianPosterior<f64>;
pub type PsiStats = psi::PsiStats<f64>;
pub type LayerParams = bound::LayerParams<f64>;
pub type LayerBoundResult = bound::LayerBoundResult<f64>;
pub type DgpModel = model::DgpModel<f64>;
pub type BoundBreakdown = model::BoundBreakdown<f64>;
pub type Predictor = infer::Predictor<f64>;
pub type PartialReduction = executor::PartialReduction<f64>;
pub type BoState = bo::BoState<f64>;
